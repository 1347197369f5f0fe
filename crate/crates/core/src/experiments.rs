//! Test-set quality experiments: uniform against class-biased test sets.
//!
//! Every class gets one seeded shuffled order of its dataset cases and every
//! sample takes a prefix of each class order. Samples built from the same
//! seed are therefore nested whenever their per-class counts are, which is
//! what makes size sweeps monotone in the standard score.
//!
//! All configurations of one experiment are evaluated in a single pipeline
//! run over the union of their cases; each configuration's kill matrix is
//! then a row selection of the shared one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::io::{self, FormatError};
use crate::model::{Cache, IclModel};
use crate::mutators::{generate_mutants, MutationConfig, MutationError, OodPool, Shortfall};
use crate::pipeline::{kill_matrix, run_evaluation, KillMatrix, PipelineError, RunManifest};
use crate::prompt::{DemoSet, TaskSpec, TestCase};
use crate::scoring::{score_report, Score, ScoreError, ScoreReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RATIOS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("class {class:?} needs {needed} cases but the dataset has {available}")]
    InsufficientClassData {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("dataset case {index} has label {label:?}, which the task does not define")]
    UnknownLabel { index: usize, label: String },
    #[error("{0:?} is not a label of the task")]
    UnknownClass(String),
    #[error("sample size {size} is too small for {classes} classes")]
    SizeTooSmall { size: usize, classes: usize },
    #[error("invalid sweep ratio {0}; ratios must lie in (0, 1]")]
    InvalidRatio(f64),
    #[error("configuration {configuration}: {source}")]
    Score {
        configuration: String,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "biased_class", rename_all = "snake_case")]
pub enum SamplingMode {
    Uniform,
    NonUniform(String),
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::Uniform => f.write_str("uniform"),
            SamplingMode::NonUniform(c) => write!(f, "non-uniform[{c}]"),
        }
    }
}

/// Per-class seeded orders over a dataset.
#[derive(Debug, Clone)]
pub struct ClassOrder {
    labels: Vec<String>,
    orders: Vec<Vec<usize>>,
    /// Classes in the order they receive leftover cases when a count does not
    /// split evenly.
    remainder_rank: Vec<usize>,
}

impl ClassOrder {
    pub fn new(dataset: &[TestCase], labels: &[String], seed: u64) -> Result<Self, ExperimentError> {
        Self::from_rng(dataset, labels, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng<R: Rng + ?Sized>(dataset: &[TestCase], labels: &[String], rng: &mut R) -> Result<Self, ExperimentError> {
        let class_of: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut orders = vec![Vec::new(); labels.len()];
        for (index, case) in dataset.iter().enumerate() {
            let class = class_of.get(case.label.as_str()).ok_or_else(|| ExperimentError::UnknownLabel {
                index,
                label: case.label.clone(),
            })?;
            orders[*class].push(index);
        }
        for order in &mut orders {
            order.shuffle(rng);
        }
        let mut remainder_rank: Vec<usize> = (0..labels.len()).collect();
        remainder_rank.shuffle(rng);
        Ok(Self {
            labels: labels.to_vec(),
            orders,
            remainder_rank,
        })
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn class_index(&self, label: &str) -> Result<usize, ExperimentError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ExperimentError::UnknownClass(label.to_string()))
    }

    /// `t / C` per class, with the remainder going one each to the first
    /// classes of the seeded rank. Monotone in `t` for every class.
    pub fn uniform_counts(&self, t: usize) -> Vec<usize> {
        let c = self.class_count();
        let mut counts = vec![t / c; c];
        for &class in self.remainder_rank.iter().take(t % c) {
            counts[class] += 1;
        }
        counts
    }

    /// `ceil(t / 2)` from the biased class plus `floor(t / 2)` spread as in
    /// [`ClassOrder::uniform_counts`] over all classes.
    pub fn nonuniform_counts(&self, t: usize, biased: usize) -> Vec<usize> {
        let mut counts = self.uniform_counts(t / 2);
        counts[biased] += t - t / 2;
        counts
    }

    pub fn counts(&self, mode: &SamplingMode, t: usize) -> Result<Vec<usize>, ExperimentError> {
        Ok(match mode {
            SamplingMode::Uniform => self.uniform_counts(t),
            SamplingMode::NonUniform(b) => self.nonuniform_counts(t, self.class_index(b)?),
        })
    }

    /// Largest size not above `requested` at which `mode` has exact class
    /// proportions: a multiple of `C` for uniform and of `2C` otherwise.
    pub fn adjusted_size(&self, mode: &SamplingMode, requested: usize) -> Result<usize, ExperimentError> {
        let c = self.class_count();
        let unit = match mode {
            SamplingMode::Uniform => c,
            SamplingMode::NonUniform(_) => 2 * c,
        };
        let size = requested - requested % unit;
        if size == 0 {
            return Err(ExperimentError::SizeTooSmall {
                size: requested,
                classes: c,
            });
        }
        if size != requested {
            log::warn!("{mode}: sample size {requested} adjusted to {size}");
        }
        Ok(size)
    }

    /// Dataset indices for the given per-class counts: class by class, each
    /// a prefix of that class's order.
    pub fn take(&self, counts: &[usize]) -> Result<Vec<usize>, ExperimentError> {
        let mut out = Vec::with_capacity(counts.iter().sum());
        for ((label, order), &n) in self.labels.iter().zip(&self.orders).zip(counts) {
            if n > order.len() {
                return Err(ExperimentError::InsufficientClassData {
                    class: label.clone(),
                    needed: n,
                    available: order.len(),
                });
            }
            out.extend_from_slice(&order[..n]);
        }
        Ok(out)
    }
}

/// A drawn test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub requested: usize,
    pub indices: Vec<usize>,
    pub cases: Vec<TestCase>,
}

fn draw<R: Rng + ?Sized>(
    dataset: &[TestCase],
    labels: &[String],
    size: usize,
    mode: &SamplingMode,
    rng: &mut R,
) -> Result<Sample, ExperimentError> {
    let order = ClassOrder::from_rng(dataset, labels, rng)?;
    let size = order.adjusted_size(mode, size)?;
    let indices = order.take(&order.counts(mode, size)?)?;
    Ok(Sample {
        requested: size,
        cases: indices.iter().map(|&i| dataset[i].clone()).collect(),
        indices,
    })
}

/// Equal per-class counts, without replacement within each class.
pub fn sample_uniform<R: Rng + ?Sized>(
    dataset: &[TestCase],
    labels: &[String],
    size: usize,
    rng: &mut R,
) -> Result<Sample, ExperimentError> {
    draw(dataset, labels, size, &SamplingMode::Uniform, rng)
}

/// Half the set from `biased_class`, half spread evenly over all classes.
pub fn sample_nonuniform<R: Rng + ?Sized>(
    dataset: &[TestCase],
    labels: &[String],
    size: usize,
    biased_class: &str,
    rng: &mut R,
) -> Result<Sample, ExperimentError> {
    draw(dataset, labels, size, &SamplingMode::NonUniform(biased_class.to_string()), rng)
}

/// Inputs shared by both experiment kinds.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub demos: DemoSet,
    pub dataset: Vec<TestCase>,
    pub pool: OodPool,
    pub mutation: MutationConfig,
    /// Drives test-set sampling; mutant generation uses `mutation.seed`.
    pub seed: u64,
    /// Base test-set size; defaults to `n / 2` where `n` is half the dataset.
    pub size: Option<usize>,
    pub ratios: Vec<f64>,
    pub parallelism: Parallelism,
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, demos: DemoSet, dataset: Vec<TestCase>, pool: OodPool) -> Self {
        Self {
            task,
            demos,
            dataset,
            pool,
            mutation: MutationConfig::default(),
            seed: 0,
            size: None,
            ratios: DEFAULT_RATIOS.to_vec(),
            parallelism: Parallelism::default(),
        }
    }

    pub fn base_size(&self) -> usize {
        self.size.unwrap_or(self.dataset.len() / 2 / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigurationResult {
    pub name: String,
    pub sampling: SamplingMode,
    pub size: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub scores: ScoreReport,
}

/// Exact means over the biased-class configurations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AveragedScores {
    pub ms_standard: Score,
    pub ms_group: Score,
    pub per_group: BTreeMap<usize, Score>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityComparison {
    pub uniform: ConfigurationResult,
    pub non_uniform: Vec<ConfigurationResult>,
    pub averaged_non_uniform: AveragedScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub uniform_size: usize,
    pub non_uniform_size: usize,
    pub uniform: AveragedScores,
    pub non_uniform: AveragedScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub task: String,
    pub seed: u64,
    pub base_size: usize,
    pub mutation_config: MutationConfig,
    pub mutant_shortfalls: Vec<Shortfall>,
    pub manifest: RunManifest,
    pub quality: QualityComparison,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
}

fn averaged(results: &[&ConfigurationResult]) -> AveragedScores {
    let mean = |f: &dyn Fn(&ScoreReport) -> Score| {
        Score::mean(&results.iter().map(|r| f(&r.scores)).collect::<Vec<_>>()).unwrap_or_else(Score::zero)
    };
    let groups: BTreeSet<usize> = results.iter().flat_map(|r| r.scores.per_group.keys().copied()).collect();
    AveragedScores {
        ms_standard: mean(&|s| s.ms_standard),
        ms_group: mean(&|s| s.ms_group),
        per_group: groups
            .into_iter()
            .map(|g| (g, mean(&|s| s.per_group.get(&g).copied().unwrap_or_else(Score::zero))))
            .collect(),
    }
}

/// One evaluation over the union of every configuration's cases.
struct SharedRun {
    order: ClassOrder,
    kills: KillMatrix,
    /// Dataset index to kill-matrix row, for cases that passed the baseline.
    row_of: HashMap<usize, usize>,
    manifest: RunManifest,
    shortfalls: Vec<Shortfall>,
}

impl SharedRun {
    fn evaluate(
        config: &ExperimentConfig,
        model: &dyn IclModel,
        cache: &Cache,
        order: ClassOrder,
        union: &BTreeSet<usize>,
    ) -> Result<Self, ExperimentError> {
        let mutants = generate_mutants(&config.demos, &config.task, &config.mutation, &config.pool, config.parallelism)?;
        let union: Vec<usize> = union.iter().copied().collect();
        let tests: Vec<TestCase> = union.iter().map(|&i| config.dataset[i].clone()).collect();
        let matrix = run_evaluation(model, &config.task, &config.demos, &mutants.mutants, &tests, config.parallelism, cache)?;
        let kills = kill_matrix(&matrix)?;
        let row_of = kills
            .case_indices
            .iter()
            .enumerate()
            .map(|(row, &position)| (union[position], row))
            .collect();
        let mut manifest = RunManifest::new(&config.task, &config.demos, model, &matrix);
        manifest.mutation_config = Some(config.mutation.clone());
        manifest.seed = Some(config.seed);
        Ok(Self {
            order,
            kills,
            row_of,
            manifest,
            shortfalls: mutants.shortfalls,
        })
    }

    fn configuration(&self, mode: &SamplingMode, size: usize) -> Result<ConfigurationResult, ExperimentError> {
        let counts = self.order.counts(mode, size)?;
        let indices = self.order.take(&counts)?;
        let rows: Vec<usize> = indices.iter().filter_map(|i| self.row_of.get(i).copied()).collect();
        let name = mode.to_string();
        let scores = score_report(&self.kills.select_rows(&rows)).map_err(|source| ExperimentError::Score {
            configuration: name.clone(),
            source,
        })?;
        Ok(ConfigurationResult {
            name,
            sampling: mode.clone(),
            size,
            class_counts: self.order.labels.iter().cloned().zip(counts).collect(),
            scores,
        })
    }

    fn quality(&self, modes: &Modes) -> Result<QualityComparison, ExperimentError> {
        let uniform = self.configuration(&SamplingMode::Uniform, modes.uniform_size)?;
        let non_uniform = modes
            .biased
            .iter()
            .map(|m| self.configuration(m, modes.non_uniform_size))
            .collect::<Result<Vec<_>, _>>()?;
        let averaged_non_uniform = averaged(&non_uniform.iter().collect::<Vec<_>>());
        Ok(QualityComparison {
            uniform,
            non_uniform,
            averaged_non_uniform,
        })
    }
}

struct Modes {
    uniform_size: usize,
    non_uniform_size: usize,
    biased: Vec<SamplingMode>,
}

impl Modes {
    fn new(order: &ClassOrder, labels: &[String], base: usize) -> Result<Self, ExperimentError> {
        let biased: Vec<SamplingMode> = labels.iter().map(|l| SamplingMode::NonUniform(l.clone())).collect();
        Ok(Self {
            uniform_size: order.adjusted_size(&SamplingMode::Uniform, base)?,
            non_uniform_size: order.adjusted_size(&biased[0], base)?,
            biased,
        })
    }

    /// Every configuration at full size; smaller sweep samples are subsets.
    fn union(&self, order: &ClassOrder) -> Result<BTreeSet<usize>, ExperimentError> {
        let mut union = BTreeSet::new();
        union.extend(order.take(&order.counts(&SamplingMode::Uniform, self.uniform_size)?)?);
        for mode in &self.biased {
            union.extend(order.take(&order.counts(mode, self.non_uniform_size)?)?);
        }
        Ok(union)
    }
}

fn report(config: &ExperimentConfig, kind: &str, run: SharedRun, quality: QualityComparison, sweep: Vec<SweepPoint>) -> ExperimentReport {
    ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        experiment: kind.to_string(),
        task: config.task.name.clone(),
        seed: config.seed,
        base_size: config.base_size(),
        mutation_config: config.mutation.clone(),
        mutant_shortfalls: run.shortfalls,
        manifest: run.manifest,
        quality,
        sweep,
    }
}

/// Scores one uniform test set and one non-uniform test set per biased class.
pub fn run_quality_comparison(
    config: &ExperimentConfig,
    model: &dyn IclModel,
    cache: &Cache,
) -> Result<ExperimentReport, ExperimentError> {
    let labels = &config.task.labels;
    let order = ClassOrder::new(&config.dataset, labels, config.seed)?;
    let modes = Modes::new(&order, labels, config.base_size())?;
    let union = modes.union(&order)?;
    let run = SharedRun::evaluate(config, model, cache, order, &union)?;
    let quality = run.quality(&modes)?;
    Ok(report(config, "quality", run, quality, Vec::new()))
}

/// Repeats the comparison on nested subsamples of `round(r * size)` cases.
pub fn run_size_sweep(config: &ExperimentConfig, model: &dyn IclModel, cache: &Cache) -> Result<ExperimentReport, ExperimentError> {
    if let Some(&r) = config.ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(ExperimentError::InvalidRatio(r));
    }
    let labels = &config.task.labels;
    let order = ClassOrder::new(&config.dataset, labels, config.seed)?;
    let modes = Modes::new(&order, labels, config.base_size())?;
    let union = modes.union(&order)?;
    let run = SharedRun::evaluate(config, model, cache, order, &union)?;
    let quality = run.quality(&modes)?;
    let mut sweep = Vec::with_capacity(config.ratios.len());
    for &ratio in &config.ratios {
        let uniform_size = (ratio * modes.uniform_size as f64).round() as usize;
        let non_uniform_size = (ratio * modes.non_uniform_size as f64).round() as usize;
        let uniform = run.configuration(&SamplingMode::Uniform, uniform_size)?;
        let non_uniform = modes
            .biased
            .iter()
            .map(|m| run.configuration(m, non_uniform_size))
            .collect::<Result<Vec<_>, _>>()?;
        sweep.push(SweepPoint {
            ratio,
            uniform_size,
            non_uniform_size,
            uniform: averaged(&[&uniform]),
            non_uniform: averaged(&non_uniform.iter().collect::<Vec<_>>()),
        });
    }
    Ok(report(config, "sweep", run, quality, sweep))
}

impl ExperimentReport {
    pub const SCORES_CSV_HEADER: &'static str = "configuration,size,ms_standard,ms_group,NL,OL,BI,DS,OD,DR";
    pub const PLOT_CSV_HEADER: &'static str = "ratio,series,score";

    /// One row per configuration plus the averaged non-uniform row.
    pub fn scores_csv(&self) -> String {
        let mut out = format!("{}\n", Self::SCORES_CSV_HEADER);
        let q = &self.quality;
        for r in std::iter::once(&q.uniform).chain(&q.non_uniform) {
            out.push_str(&format!("{},{},{}\n", r.name, r.size, r.scores.csv_row()));
        }
        let avg = &q.averaged_non_uniform;
        let mut cols = vec![avg.ms_standard.as_f64().to_string(), avg.ms_group.as_f64().to_string()];
        for kind in crate::mutators::MutatorKind::ALL {
            cols.push(avg.per_group.get(&kind.group_index()).map(|s| s.as_f64().to_string()).unwrap_or_default());
        }
        let size = q.non_uniform.first().map(|r| r.size).unwrap_or(0);
        out.push_str(&format!("non-uniform[mean],{size},{}\n", cols.join(",")));
        out
    }

    /// Long-format plot data: one row per (ratio, mode x metric).
    pub fn plot_csv(&self) -> String {
        let mut out = format!("{}\n", Self::PLOT_CSV_HEADER);
        for p in &self.sweep {
            for (series, score) in [
                ("uni_ms_standard", p.uniform.ms_standard),
                ("uni_ms_group", p.uniform.ms_group),
                ("non_ms_standard", p.non_uniform.ms_standard),
                ("non_ms_group", p.non_uniform.ms_group),
            ] {
                out.push_str(&format!("{},{series},{}\n", p.ratio, score.as_f64()));
            }
        }
        out
    }

    /// Writes `report.json`, `scores.csv` and, for sweeps, `plot.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), FormatError> {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        io::write_string(&dir.join("report.json"), &(serde_json::to_string_pretty(self)? + "\n"))?;
        io::write_string(&dir.join("scores.csv"), &self.scores_csv())?;
        if !self.sweep.is_empty() {
            io::write_string(&dir.join("plot.csv"), &self.plot_csv())?;
        }
        Ok(())
    }
}
