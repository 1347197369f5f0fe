//! Runs the quality comparison on the bundled topic task for many seeds and
//! reports how often uniform test sets beat the averaged biased ones.
//!
//! `cargo run --release -p mile-core --example quality_seeds -- 200`

use std::time::Instant;

use mile_core::experiments::{run_quality_comparison, ExperimentConfig};
use mile_core::{fixtures, Cache, MockModel};

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let f = fixtures::topic();
    let mut config = ExperimentConfig::new(f.task, f.demos, f.dataset, fixtures::ood_pool());
    let (mut both, mut standard, mut group) = (0, 0, 0);
    let started = Instant::now();
    for seed in 0..seeds {
        config.seed = seed;
        config.mutation.seed = seed;
        let model = MockModel::new();
        let t0 = Instant::now();
        let report = run_quality_comparison(&config, &model, &Cache::in_memory()).expect("quality run");
        if seed == 0 {
            println!("calls {} in {:?}", model.calls(), t0.elapsed());
        }
        let q = &report.quality;
        let s = q.uniform.scores.ms_standard > q.averaged_non_uniform.ms_standard;
        let g = q.uniform.scores.ms_group > q.averaged_non_uniform.ms_group;
        standard += s as u64;
        group += g as u64;
        both += (s && g) as u64;
        if !(s && g) {
            println!(
                "seed {seed}: MS_S {} vs {}, MS_G {} vs {}",
                q.uniform.scores.ms_standard,
                q.averaged_non_uniform.ms_standard,
                q.uniform.scores.ms_group,
                q.averaged_non_uniform.ms_group
            );
        }
    }
    println!(
        "{seeds} seeds in {:.1?}: MS_S {standard}, MS_G {group}, both {both}",
        started.elapsed()
    );
}
