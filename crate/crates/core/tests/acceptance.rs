//! Acceptance suite. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check_mutant, check_set, oracle_scores, random_demos, random_matrix, random_pool, random_task, FlakyModel, StubServer};
use mile_core::experiments::{run_quality_comparison, ExperimentConfig};
use mile_core::fixtures;
use mile_core::model::ModelError;
use mile_core::pipeline::{write_run_dir, PipelineError};
use mile_core::scoring::ScoreError;
use mile_core::{
    classify, generate_mutants, group_score, individual_group_score, kill_matrix, render_prompt, run_evaluation,
    standard_score, Cache, KillMatrix, MockModel, ModelEndpoint, MutationConfig, MutatorKind, OutcomeMatrix,
    Parallelism, ParsedLabel, RemoteModel, RunManifest, Score,
};

const C1_TRIPLES: usize = 1000;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_TOTAL: usize = 120;
const C2_PER_GROUP: usize = 20;
const C3_RANDOM_MATRICES: usize = 10_000;
const C3_MAX_CASES: usize = 5;
const C3_MAX_MUTANTS: usize = 10;
const C3_EXHAUSTIVE_CASES: usize = 3;
const C3_EXHAUSTIVE_MUTANTS: usize = 4;
const FLOAT_TOLERANCE: f64 = 1e-12;
const C5_PAIRS: usize = 100;
const C6_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const C6_BUDGET: Duration = Duration::from_secs(60);
const C7_INTERRUPT_FRACTION: f64 = 0.5;
const C8_API_KEY_ENV: &str = "MILE_ACCEPTANCE_STUB_KEY";
const C8_API_KEY: &str = "sk-stub-0123";
const C8_INJECTED_FAILURES: usize = 2;
const C9_GROUPS: usize = 6;
const C9_KILLED_PER_CASE: usize = 2;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mutator_invariants() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0001);
    let mut mutants = 0;
    let mut violations = Vec::new();
    for triple in 0..C1_TRIPLES {
        let task = random_task(&mut rng);
        let k = rng.random_range(2..=24);
        let demos = random_demos(&mut rng, &task, k);
        let pool = random_pool(&mut rng);
        let max_shuffles = match k {
            2 => 1,
            3 => 5,
            _ => 20,
        };
        let config = MutationConfig {
            mutants_per_operator: rng.random_range(1..=max_shuffles),
            repetition_count: rng.random_range(1..=3),
            seed: rng.random(),
            ..MutationConfig::default()
        };
        match generate_mutants(&demos, &task, &config, &pool, Parallelism::sequential()) {
            Ok(set) => {
                mutants += set.mutants.len();
                if let Err(e) = check_set(&config, &set.mutants, &set.shortfalls) {
                    violations.push(format!("triple {triple}: {e}"));
                }
                for m in &set.mutants {
                    if let Err(e) = check_mutant(&demos, &task, &pool, &config, m) {
                        violations.push(format!("triple {triple}: {e}"));
                    }
                }
            }
            Err(e) => violations.push(format!("triple {triple}: generation failed: {e}")),
        }
    }
    let elapsed = started.elapsed();
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    ensure(elapsed < C1_BUDGET, || format!("took {elapsed:.2?}, budget {C1_BUDGET:?}"))?;
    Ok(format!("{C1_TRIPLES} triples, {mutants} mutants, 0 violations in {elapsed:.2?}"))
}

fn default_cardinality() -> Result<String, String> {
    let pool = fixtures::ood_pool();
    let config = MutationConfig::default();
    let mut detail = Vec::new();
    for name in fixtures::NAMES {
        let f = fixtures::fixture(name).unwrap();
        ensure(f.demos.len() == 20, || format!("{name} has {} demos", f.demos.len()))?;
        let set = generate_mutants(&f.demos, &f.task, &config, &pool, Parallelism::default()).map_err(|e| e.to_string())?;
        ensure(set.mutants.len() == C2_TOTAL, || format!("{name}: {} mutants", set.mutants.len()))?;
        for kind in MutatorKind::ALL {
            let n = set.mutants.iter().filter(|m| m.kind == kind).count();
            ensure(n == C2_PER_GROUP, || format!("{name}: {kind} has {n} mutants"))?;
        }
        ensure(set.shortfalls.is_empty(), || format!("{name}: shortfalls {:?}", set.shortfalls))?;
        detail.push(name);
    }
    Ok(format!("{C2_TOTAL} mutants, {C2_PER_GROUP} per group, for {}", detail.join(", ")))
}

fn close(a: Score, b: Ratio<u64>) -> bool {
    a.ratio() == b && (a.as_f64() - *b.numer() as f64 / *b.denom() as f64).abs() <= FLOAT_TOLERANCE
}

/// Compares every library score with the oracle on one matrix.
fn agree(km: &KillMatrix) -> Result<(), String> {
    let oracle = oracle_scores(&km.kills, &km.group_of);
    let s = standard_score(km).map_err(|e| e.to_string())?;
    ensure(close(s, oracle.standard), || format!("MS_S {s:?} vs {:?} on {:?}", oracle.standard, km.kills))?;
    match (group_score(km), oracle.group) {
        (Ok(g), Some(o)) => ensure(close(g, o), || format!("MS_G {g:?} vs {o:?}"))?,
        (Err(ScoreError::NoPassedCases), None) => {}
        (lib, o) => return Err(format!("MS_G {lib:?} vs oracle {o:?}")),
    }
    for (&g, want) in &oracle.individual {
        match (individual_group_score(km, g), want) {
            (Ok(s), Some(o)) => ensure(close(s, *o), || format!("group {g}: {s:?} vs {o:?}"))?,
            (Err(ScoreError::NoPassedCases), None) => {}
            (lib, o) => return Err(format!("group {g}: {lib:?} vs oracle {o:?}")),
        }
    }
    Ok(())
}

/// Restricted growth strings: every partition of `m` mutants into groups.
fn partitions(m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                let next = p.iter().max().map_or(0, |x| x + 1);
                (0..=next).map(move |g| {
                    let mut q = p.clone();
                    q.push(g);
                    q
                })
            })
            .collect();
    }
    out
}

fn exhaustive_matrices(mut f: impl FnMut(&KillMatrix) -> Result<(), String>) -> Result<usize, String> {
    let mut n = 0;
    for t in 0..=C3_EXHAUSTIVE_CASES {
        for m in 1..=C3_EXHAUSTIVE_MUTANTS {
            for groups in partitions(m) {
                for bits in 0u32..(1 << (t * m)) {
                    let rows = (0..t).map(|r| (0..m).map(|c| bits >> (r * m + c) & 1 == 1).collect()).collect();
                    f(&KillMatrix::from_rows(rows, groups.clone()))?;
                    n += 1;
                }
            }
        }
    }
    Ok(n)
}

fn random_small_matrices(seed: u64, mut f: impl FnMut(&KillMatrix) -> Result<(), String>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..C3_RANDOM_MATRICES {
        let t = rng.random_range(0..=C3_MAX_CASES);
        let m = rng.random_range(1..=C3_MAX_MUTANTS);
        f(&random_matrix(&mut rng, t, m))?;
    }
    Ok(())
}

fn score_oracle() -> Result<String, String> {
    random_small_matrices(0x5EED_0003, agree)?;
    let n = exhaustive_matrices(agree)?;
    Ok(format!(
        "{C3_RANDOM_MATRICES} random matrices (T<={C3_MAX_CASES}, m<={C3_MAX_MUTANTS}) and {n} exhaustive ones agree exactly"
    ))
}

fn decomposition_holds(km: &KillMatrix) -> Result<(), String> {
    let Ok(g) = group_score(km) else { return Ok(()) };
    let parts: Vec<Score> = km.groups().into_iter().map(|k| individual_group_score(km, k).unwrap()).collect();
    let mean = Score::mean(&parts).unwrap();
    ensure(g == mean && (g.as_f64() - mean.as_f64()).abs() <= FLOAT_TOLERANCE, || {
        format!("MS_G {g:?} != mean {mean:?}")
    })
}

fn decomposition_identity() -> Result<String, String> {
    random_small_matrices(0x5EED_0004, decomposition_holds)?;
    let n = exhaustive_matrices(decomposition_holds)?;
    // Also on real matrices from the mock pipeline.
    let pool = fixtures::ood_pool();
    for name in fixtures::NAMES {
        let f = fixtures::fixture(name).unwrap();
        let mutants = generate_mutants(&f.demos, &f.task, &MutationConfig::default(), &pool, Parallelism::default())
            .map_err(|e| e.to_string())?;
        let matrix = run_evaluation(
            &MockModel::new(),
            &f.task,
            &f.demos,
            &mutants.mutants,
            &f.dataset,
            Parallelism::default(),
            &Cache::in_memory(),
        )
        .map_err(|e| e.to_string())?;
        decomposition_holds(&kill_matrix(&matrix).map_err(|e| e.to_string())?)?;
    }
    Ok(format!("{} generated matrices plus the 4 fixture runs", C3_RANDOM_MATRICES + n))
}

fn monotonicity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0005);
    let mut group_drops = 0;
    for pair in 0..C5_PAIRS {
        let t = rng.random_range(1..=40);
        let m = rng.random_range(1..=60);
        let big = random_matrix(&mut rng, t, m);
        let keep = rng.random_range(0..=t);
        let mut rows = sample(&mut rng, t, keep).into_vec();
        rows.sort_unstable();
        let small = big.select_rows(&rows);
        let (s_small, s_big) = (standard_score(&small).unwrap(), standard_score(&big).unwrap());
        ensure(s_big >= s_small, || format!("pair {pair}: MS_S fell from {s_small} to {s_big}"))?;
        if let (Ok(a), Ok(b)) = (group_score(&small), group_score(&big)) {
            group_drops += (b < a) as usize;
        }
    }
    // Witness: adding a case that kills nothing halves MS_G.
    let groups: Vec<usize> = (0..6).collect();
    let small = KillMatrix::from_rows(vec![vec![true; 6]], groups.clone());
    let big = KillMatrix::from_rows(vec![vec![true; 6], vec![false; 6]], groups);
    let (g_small, g_big) = (group_score(&small).unwrap(), group_score(&big).unwrap());
    ensure(g_big < g_small, || "witness failed".into())?;
    ensure(standard_score(&big).unwrap() >= standard_score(&small).unwrap(), || "witness MS_S".into())?;
    Ok(format!(
        "{C5_PAIRS} nested pairs never lower MS_S; MS_G dropped in {group_drops} of them; witness MS_G {g_small} -> {g_big}"
    ))
}

fn quality_replication() -> Result<String, String> {
    let started = Instant::now();
    let topic = fixtures::topic();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in C6_SEEDS {
        let mut config = ExperimentConfig::new(topic.task.clone(), topic.demos.clone(), topic.dataset.clone(), fixtures::ood_pool());
        config.seed = seed;
        config.mutation.seed = seed;
        let model = MockModel::new();
        let report = run_quality_comparison(&config, &model, &Cache::in_memory()).map_err(|e| e.to_string())?;
        let q = &report.quality;
        let (us, ug) = (q.uniform.scores.ms_standard, q.uniform.scores.ms_group);
        let (ns, ng) = (q.averaged_non_uniform.ms_standard, q.averaged_non_uniform.ms_group);
        lines.push(format!("seed {seed}: MS_S {us} vs {ns}, MS_G {ug} vs {ng}"));
        if !(us > ns && ug > ng) {
            failures.push(seed);
        }
    }
    let elapsed = started.elapsed();
    ensure(failures.is_empty(), || format!("seeds {failures:?} failed; {}", lines.join("; ")))?;
    ensure(elapsed < C6_BUDGET, || format!("took {elapsed:.2?}, budget {C6_BUDGET:?}"))?;
    Ok(format!("{}; {elapsed:.2?}, mock model only", lines.join("; ")))
}

fn run_files(matrix: &OutcomeMatrix, manifest: &RunManifest) -> Result<Vec<(String, Vec<u8>)>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_run_dir(dir.path(), manifest, matrix).map_err(|e| e.to_string())?;
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism_and_resume() -> Result<String, String> {
    let f = fixtures::fixture("entailment").unwrap();
    let pool = fixtures::ood_pool();
    let config = MutationConfig { seed: 11, ..MutationConfig::default() };
    let mutants = generate_mutants(&f.demos, &f.task, &config, &pool, Parallelism::new(4)).map_err(|e| e.to_string())?;
    let again = generate_mutants(&f.demos, &f.task, &config, &pool, Parallelism::sequential()).map_err(|e| e.to_string())?;
    ensure(mutants == again, || "mutant generation is not deterministic".into())?;

    let full = |parallelism: Parallelism, model: &MockModel| {
        let matrix = run_evaluation(model, &f.task, &f.demos, &mutants.mutants, &f.dataset, parallelism, &Cache::in_memory())
            .map_err(|e| e.to_string())?;
        let manifest = RunManifest::new(&f.task, &f.demos, model, &matrix);
        Ok::<_, String>((run_files(&matrix, &manifest)?, matrix))
    };
    let reference_model = MockModel::new();
    let (files_a, matrix_a) = full(Parallelism::new(4), &reference_model)?;
    let (files_b, _) = full(Parallelism::sequential(), &MockModel::new())?;
    ensure(files_a == files_b, || "run directories differ between runs".into())?;
    let total_calls = reference_model.calls();

    let report = |seed| {
        let mut c = ExperimentConfig::new(f.task.clone(), f.demos.clone(), f.dataset.clone(), pool.clone());
        c.seed = seed;
        c.mutation.seed = seed;
        let r = run_quality_comparison(&c, &MockModel::new(), &Cache::in_memory()).map_err(|e| e.to_string())?;
        serde_json::to_vec_pretty(&r).map_err(|e| e.to_string())
    };
    ensure(report(5)? == report(5)?, || "experiment reports differ".into())?;

    // Interrupt at about half the calls, then resume from the disk cache.
    let cache_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let budget = (total_calls as f64 * C7_INTERRUPT_FRACTION) as usize;
    let flaky = FlakyModel::new(budget);
    let cache = Cache::open(cache_dir.path()).map_err(|e| e.to_string())?;
    match run_evaluation(&flaky, &f.task, &f.demos, &mutants.mutants, &f.dataset, Parallelism::new(4), &cache) {
        Err(PipelineError::PartialRun { .. }) => {}
        other => return Err(format!("interrupted run returned {:?}", other.map(|_| ()))),
    }
    let done = flaky.succeeded.load(Ordering::SeqCst);
    drop(cache);

    let resumed_model = MockModel::new();
    let cache = Cache::open(cache_dir.path()).map_err(|e| e.to_string())?;
    let resumed = run_evaluation(&resumed_model, &f.task, &f.demos, &mutants.mutants, &f.dataset, Parallelism::new(4), &cache)
        .map_err(|e| e.to_string())?;
    ensure(resumed == matrix_a, || "resumed matrix differs from the uninterrupted one".into())?;
    let calls = resumed_model.calls();
    ensure(calls == total_calls - done, || format!("resume made {calls} calls, expected {}", total_calls - done))?;
    Ok(format!(
        "byte-identical run dirs and reports; interrupted after {done}/{total_calls} calls, resume made {calls}"
    ))
}

fn wire_protocol() -> Result<String, String> {
    std::env::set_var(C8_API_KEY_ENV, C8_API_KEY);
    let f = fixtures::fixture("sentiment").unwrap();
    let endpoint = |base: &str| {
        let mut e = ModelEndpoint::new(base, "stub-model");
        e.api_key_env = C8_API_KEY_ENV.into();
        e.backoff_base_ms = 20;
        e.max_retries = 3;
        e.request_timeout_secs = 5.0;
        e
    };

    // Labels round-trip.
    let cases = &f.dataset[..6];
    let labels = f.task.labels.clone();
    let answers = labels.clone();
    let server = StubServer::start(cases.len(), Box::new(move |n, _| (200, format!(" {}\n", answers[n % answers.len()]))));
    let model = RemoteModel::new(endpoint(&server.base_url)).map_err(|e| e.to_string())?;
    for (n, case) in cases.iter().enumerate() {
        let p = classify(&model, &f.task, &f.demos, case, &Cache::in_memory()).map_err(|e| e.to_string())?;
        let want = &labels[n % labels.len()];
        ensure(p.parsed == ParsedLabel::Label(want.clone()), || format!("case {n}: {:?} != {want}", p.parsed))?;
    }
    let requests = server.join();
    for (n, (r, case)) in requests.iter().zip(cases).enumerate() {
        let prompt = render_prompt(&f.task, &f.demos, case).unwrap();
        ensure(r.method == "POST" && r.path == "/v1/chat/completions", || format!("request {n}: {} {}", r.method, r.path))?;
        ensure(r.headers.get("authorization").map(String::as_str) == Some(&format!("Bearer {C8_API_KEY}")), || {
            format!("request {n}: authorization {:?}", r.headers.get("authorization"))
        })?;
        ensure(r.headers.get("content-type").is_some_and(|v| v.starts_with("application/json")), || {
            format!("request {n}: content-type")
        })?;
        ensure(r.body["temperature"].as_f64() == Some(0.0), || format!("request {n}: temperature {}", r.body["temperature"]))?;
        ensure(r.body["model"] == "stub-model", || format!("request {n}: model {}", r.body["model"]))?;
        ensure(r.body["messages"][0]["content"].as_str() == Some(prompt.as_str()), || format!("request {n}: prompt"))?;
    }

    // Injected 5xx responses are retried with backoff.
    let label = labels[0].clone();
    let server = StubServer::start(
        C8_INJECTED_FAILURES + 1,
        Box::new(move |n, _| if n < C8_INJECTED_FAILURES { (503, "overloaded".into()) } else { (200, label.clone()) }),
    );
    let model = RemoteModel::new(endpoint(&server.base_url)).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let p = classify(&model, &f.task, &f.demos, &cases[0], &Cache::in_memory()).map_err(|e| e.to_string())?;
    let waited = started.elapsed();
    let seen = server.join().len();
    ensure(p.parsed == ParsedLabel::Label(labels[0].clone()), || format!("after retries got {:?}", p.parsed))?;
    ensure(seen == C8_INJECTED_FAILURES + 1, || format!("{seen} requests for {C8_INJECTED_FAILURES} failures"))?;
    ensure(waited >= Duration::from_millis(20 + 40), || format!("backoff too short: {waited:?}"))?;

    // Retries give up, and auth failures are not retried.
    let server = StubServer::start(4, Box::new(|_, _| (500, "down".into())));
    let model = RemoteModel::new(endpoint(&server.base_url)).map_err(|e| e.to_string())?;
    let err = classify(&model, &f.task, &f.demos, &cases[0], &Cache::in_memory()).unwrap_err();
    ensure(matches!(err, ModelError::Endpoint { status: Some(500), .. }), || format!("exhausted retries gave {err}"))?;
    ensure(server.join().len() == 4, || "expected 1 attempt plus 3 retries".into())?;
    let server = StubServer::start(1, Box::new(|_, _| (401, "bad key".into())));
    let model = RemoteModel::new(endpoint(&server.base_url)).map_err(|e| e.to_string())?;
    let err = classify(&model, &f.task, &f.demos, &cases[0], &Cache::in_memory()).unwrap_err();
    ensure(matches!(err, ModelError::Auth { status: 401, .. }), || format!("401 gave {err}"))?;
    server.join();

    Ok(format!(
        "{} requests well-formed, labels round-trip, {C8_INJECTED_FAILURES} injected 503s retried after {waited:.0?}",
        cases.len()
    ))
}

fn two_of_six() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0009);
    let per_group = 20;
    let group_of: Vec<usize> = (0..C9_GROUPS).flat_map(|g| std::iter::repeat_n(g, per_group)).collect();
    let rows: Vec<Vec<bool>> = (0..50)
        .map(|_| {
            let groups = sample(&mut rng, C9_GROUPS, C9_KILLED_PER_CASE).into_vec();
            let mut row = vec![false; group_of.len()];
            for g in groups {
                for _ in 0..rng.random_range(1..=per_group) {
                    row[g * per_group + rng.random_range(0..per_group)] = true;
                }
            }
            row
        })
        .collect();
    let km = KillMatrix::from_rows(rows, group_of);
    let g = group_score(&km).map_err(|e| e.to_string())?;
    let want = Score::new(C9_KILLED_PER_CASE as u64, C9_GROUPS as u64);
    ensure(g == want, || format!("MS_G {g:?}, expected {want:?}"))?;
    ensure((g.as_f64() * C9_GROUPS as f64 - C9_KILLED_PER_CASE as f64).abs() <= FLOAT_TOLERANCE, || "float".into())?;
    Ok(format!("MS_G = {}/{} = {g}, i.e. {} groups per case", g.ratio().numer(), g.ratio().denom(), g.as_f64() * 6.0))
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("mutator invariants", mutator_invariants),
        ("default cardinality", default_cardinality),
        ("score oracle equivalence", score_oracle),
        ("decomposition identity", decomposition_identity),
        ("standard score monotonicity", monotonicity),
        ("offline quality replication", quality_replication),
        ("determinism and resume", determinism_and_resume),
        ("wire protocol", wire_protocol),
        ("group score semantics", two_of_six),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", n + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
