//! Baseline filtering, mutant evaluation and kill-matrix assembly.
//!
//! A run first classifies every test case with the unmutated demonstrations
//! and keeps only the cases answered correctly. Each kept case is then
//! classified under every mutant. Cells are independent, so they are
//! evaluated in parallel and reassembled by `(case, mutant)` position.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::io::{self, FormatError};
use crate::model::{Cache, Classifier, IclModel, ModelError};
use crate::mutators::{MutationConfig, Mutant};
use crate::prompt::{DemoSet, ParsedLabel, TaskSpec, TestCase};

/// Position of one evaluation: a test case under the original prompt
/// (`mutant_id == None`) or under a mutant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub case_index: usize,
    pub mutant_id: Option<String>,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.mutant_id {
            Some(m) => write!(f, "case {} under mutant {m}", self.case_index),
            None => write!(f, "case {} under the original prompt", self.case_index),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("test set is empty")]
    NoTests,
    #[error("no mutants to evaluate")]
    NoMutants,
    #[error("{cell}: {source}")]
    Model {
        cell: CellId,
        #[source]
        source: ModelError,
    },
    #[error("run stopped after {} of {total} cells; first failure at {cell}: {source}", completed.len())]
    PartialRun {
        completed: Vec<CellId>,
        total: usize,
        cell: CellId,
        #[source]
        source: ModelError,
    },
    #[error("outcome matrix is incomplete: {0}")]
    IncompleteMatrix(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Raw and parsed output for one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub raw: String,
    pub parsed: ParsedLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub case_index: usize,
    pub label: String,
    pub raw: String,
    pub parsed: ParsedLabel,
}

impl BaselineOutcome {
    pub fn passed(&self) -> bool {
        self.parsed.is(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassedCase {
    pub case_index: usize,
    pub case: TestCase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutantRef {
    pub id: String,
    pub group_index: usize,
}

/// Per passed case, per mutant predictions plus the baseline predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    pub passed_cases: Vec<PassedCase>,
    pub mutants: Vec<MutantRef>,
    /// `outcomes[row][column]`, rows aligned with `passed_cases`.
    pub outcomes: Vec<Vec<Outcome>>,
    /// One entry per original test case, in test-set order.
    pub baseline: Vec<BaselineOutcome>,
}

impl OutcomeMatrix {
    pub fn group_of(&self, mutant_id: &str) -> Option<usize> {
        self.mutants.iter().find(|m| m.id == mutant_id).map(|m| m.group_index)
    }

    pub fn cell_count(&self) -> usize {
        self.passed_cases.len() * self.mutants.len()
    }
}

/// `kills[row][column]` is true when the mutant's answer differs from the
/// gold label (unparseable answers included).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillMatrix {
    pub case_indices: Vec<usize>,
    pub mutant_ids: Vec<String>,
    pub group_of: Vec<usize>,
    pub kills: Vec<Vec<bool>>,
}

impl KillMatrix {
    /// Builds a matrix with synthetic ids; rows must all have `group_of.len()` entries.
    pub fn from_rows(kills: Vec<Vec<bool>>, group_of: Vec<usize>) -> Self {
        assert!(kills.iter().all(|r| r.len() == group_of.len()), "ragged kill matrix");
        Self {
            case_indices: (0..kills.len()).collect(),
            mutant_ids: (0..group_of.len()).map(|i| format!("m{i}")).collect(),
            group_of,
            kills,
        }
    }

    pub fn case_count(&self) -> usize {
        self.kills.len()
    }

    pub fn mutant_count(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_killed(&self, row: usize, column: usize) -> bool {
        self.kills[row][column]
    }

    pub fn is_column_killed(&self, column: usize) -> bool {
        self.kills.iter().any(|r| r[column])
    }

    pub fn killed_mutants(&self) -> usize {
        (0..self.mutant_count()).filter(|&c| self.is_column_killed(c)).count()
    }

    /// Distinct group indices present, ascending.
    pub fn groups(&self) -> Vec<usize> {
        self.group_of.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn columns_of_group(&self, group: usize) -> Vec<usize> {
        (0..self.group_of.len()).filter(|&c| self.group_of[c] == group).collect()
    }

    pub fn groups_killed_by(&self, row: usize) -> BTreeSet<usize> {
        self.kills[row]
            .iter()
            .zip(&self.group_of)
            .filter(|(k, _)| **k)
            .map(|(_, g)| *g)
            .collect()
    }

    /// Keeps only the given rows (by position), in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            case_indices: rows.iter().map(|&r| self.case_indices[r]).collect(),
            mutant_ids: self.mutant_ids.clone(),
            group_of: self.group_of.clone(),
            kills: rows.iter().map(|&r| self.kills[r].clone()).collect(),
        }
    }

    /// Rows are cases, columns are mutant ids; cells are 0/1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_index");
        for id in &self.mutant_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (case, row) in self.case_indices.iter().zip(&self.kills) {
            out.push_str(&case.to_string());
            for &k in row {
                out.push_str(if k { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineSplit {
    pub passed: Vec<usize>,
    pub failed: Vec<usize>,
    pub outcomes: Vec<BaselineOutcome>,
}

/// Classifies every test case with the original demonstrations and splits
/// them into passed (answer equals the gold label) and failed.
pub fn baseline_filter(
    model: &dyn IclModel,
    task: &TaskSpec,
    demos: &DemoSet,
    tests: &[TestCase],
    cache: &Cache,
    parallelism: Parallelism,
) -> Result<BaselineSplit, PipelineError> {
    if tests.is_empty() {
        return Err(PipelineError::NoTests);
    }
    let classifier = Classifier::new(model, task, demos, cache).map_err(|source| PipelineError::Model {
        cell: CellId {
            case_index: 0,
            mutant_id: None,
        },
        source,
    })?;
    let indexed: Vec<(usize, &TestCase)> = tests.iter().enumerate().collect();
    let results = parallelism.map(&indexed, |&(i, case)| {
        classifier.classify(case).map_err(|source| PipelineError::Model {
            cell: CellId {
                case_index: i,
                mutant_id: None,
            },
            source,
        })
    });
    let mut split = BaselineSplit {
        passed: Vec::new(),
        failed: Vec::new(),
        outcomes: Vec::with_capacity(tests.len()),
    };
    for ((i, case), result) in indexed.into_iter().zip(results) {
        let prediction = result?;
        let outcome = BaselineOutcome {
            case_index: i,
            label: case.label.clone(),
            raw: prediction.raw,
            parsed: prediction.parsed,
        };
        if outcome.passed() {
            split.passed.push(i);
        } else {
            split.failed.push(i);
        }
        split.outcomes.push(outcome);
    }
    Ok(split)
}

/// Runs the whole evaluation and returns the complete outcome matrix.
///
/// Completed cells land in `cache` as they finish. If a cell fails, remaining
/// cells are skipped and [`PipelineError::PartialRun`] lists what completed;
/// rerunning with the same cache only evaluates the missing cells.
pub fn run_evaluation(
    model: &dyn IclModel,
    task: &TaskSpec,
    demos: &DemoSet,
    mutants: &[Mutant],
    tests: &[TestCase],
    parallelism: Parallelism,
    cache: &Cache,
) -> Result<OutcomeMatrix, PipelineError> {
    if mutants.is_empty() {
        return Err(PipelineError::NoMutants);
    }
    let split = baseline_filter(model, task, demos, tests, cache, parallelism)?;
    if split.passed.is_empty() {
        log::warn!("no test case passed the baseline; the outcome matrix is empty");
    }
    let cells: Vec<(usize, usize)> = split
        .passed
        .iter()
        .flat_map(|&case| (0..mutants.len()).map(move |m| (case, m)))
        .collect();

    let classifiers = mutants
        .iter()
        .map(|m| {
            Classifier::new(model, task, &m.demos, cache).map_err(|source| PipelineError::Model {
                cell: CellId {
                    case_index: split.passed.first().copied().unwrap_or(0),
                    mutant_id: Some(m.id.clone()),
                },
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let abort = AtomicBool::new(false);
    let first_error: Mutex<Option<(usize, ModelError)>> = Mutex::new(None);
    let results = parallelism.map(&cells, |&(case, m)| {
        if abort.load(Ordering::Relaxed) {
            return None;
        }
        match classifiers[m].classify(&tests[case]) {
            Ok(p) => Some(Outcome {
                raw: p.raw,
                parsed: p.parsed,
            }),
            Err(e) => {
                abort.store(true, Ordering::Relaxed);
                let mut slot = first_error.lock().expect("error slot");
                let position = case * mutants.len() + m;
                // Keep the earliest failing cell so the report is stable.
                if slot.as_ref().is_none_or(|(p, _)| position < *p) {
                    *slot = Some((position, e));
                }
                None
            }
        }
    });

    let cell_id = |&(case, m): &(usize, usize)| CellId {
        case_index: case,
        mutant_id: Some(mutants[m].id.clone()),
    };
    if let Some((position, source)) = first_error.into_inner().expect("error slot") {
        let completed = cells
            .iter()
            .zip(&results)
            .filter(|(_, r)| r.is_some())
            .map(|(c, _)| cell_id(c))
            .collect();
        let failed = (position / mutants.len(), position % mutants.len());
        return Err(PipelineError::PartialRun {
            completed,
            total: cells.len(),
            cell: cell_id(&failed),
            source,
        });
    }

    let mut outcomes = Vec::with_capacity(split.passed.len());
    let mut it = results.into_iter();
    for _ in &split.passed {
        let row: Vec<Outcome> = it
            .by_ref()
            .take(mutants.len())
            .map(|o| o.expect("no failures recorded"))
            .collect();
        outcomes.push(row);
    }
    Ok(OutcomeMatrix {
        passed_cases: split
            .passed
            .iter()
            .map(|&i| PassedCase {
                case_index: i,
                case: tests[i].clone(),
            })
            .collect(),
        mutants: mutants
            .iter()
            .map(|m| MutantRef {
                id: m.id.clone(),
                group_index: m.group_index,
            })
            .collect(),
        outcomes,
        baseline: split.outcomes,
    })
}

/// Derives kills: a cell is a kill when its parsed answer is not the gold label.
pub fn kill_matrix(m: &OutcomeMatrix) -> Result<KillMatrix, PipelineError> {
    if m.outcomes.len() != m.passed_cases.len() {
        return Err(PipelineError::IncompleteMatrix(format!(
            "{} rows for {} passed cases",
            m.outcomes.len(),
            m.passed_cases.len()
        )));
    }
    let mut kills = Vec::with_capacity(m.outcomes.len());
    for (case, row) in m.passed_cases.iter().zip(&m.outcomes) {
        if row.len() != m.mutants.len() {
            return Err(PipelineError::IncompleteMatrix(format!(
                "case {} has {} of {} outcomes",
                case.case_index,
                row.len(),
                m.mutants.len()
            )));
        }
        kills.push(row.iter().map(|o| !o.parsed.is(&case.case.label)).collect());
    }
    Ok(KillMatrix {
        case_indices: m.passed_cases.iter().map(|c| c.case_index).collect(),
        mutant_ids: m.mutants.iter().map(|r| r.id.clone()).collect(),
        group_of: m.mutants.iter().map(|r| r.group_index).collect(),
        kills,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub cases: usize,
    pub passed: usize,
    pub failed: usize,
    pub mutants: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTimestamps {
    pub started_ms: u64,
    pub finished_ms: u64,
}

impl RunTimestamps {
    pub fn now_ms() -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub task: String,
    pub demo_digest: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation_config: Option<MutationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Left out of reproducible artifacts such as experiment reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<RunTimestamps>,
    pub counts: RunCounts,
}

impl RunManifest {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(task: &TaskSpec, demos: &DemoSet, model: &dyn IclModel, matrix: &OutcomeMatrix) -> Self {
        let passed = matrix.passed_cases.len();
        Self {
            format_version: Self::FORMAT_VERSION,
            task: task.name.clone(),
            demo_digest: demos.digest(),
            model: model.identity(),
            mutation_config: None,
            seed: None,
            timestamps: None,
            counts: RunCounts {
                cases: matrix.baseline.len(),
                passed,
                failed: matrix.baseline.len() - passed,
                mutants: matrix.mutants.len(),
            },
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASELINE_FILE: &str = "baseline.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const MUTANTS_FILE: &str = "mutant_groups.jsonl";
pub const PASSED_FILE: &str = "passed_cases.jsonl";
pub const KILLS_FILE: &str = "kills.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OutcomeLine {
    case_index: usize,
    mutant_id: String,
    raw: String,
    parsed: ParsedLabel,
}

/// Writes manifest, baseline, outcomes and kill-matrix files into `dir`.
pub fn write_run_dir(dir: &Path, manifest: &RunManifest, matrix: &OutcomeMatrix) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    io::write_string(
        &dir.join(MANIFEST_FILE),
        &(serde_json::to_string_pretty(manifest).map_err(FormatError::from)? + "\n"),
    )?;
    io::write_jsonl(&dir.join(BASELINE_FILE), &matrix.baseline)?;
    io::write_jsonl(&dir.join(MUTANTS_FILE), &matrix.mutants)?;
    io::write_jsonl(&dir.join(PASSED_FILE), &matrix.passed_cases)?;
    let lines: Vec<OutcomeLine> = matrix
        .passed_cases
        .iter()
        .zip(&matrix.outcomes)
        .flat_map(|(case, row)| {
            row.iter().zip(&matrix.mutants).map(move |(o, m)| OutcomeLine {
                case_index: case.case_index,
                mutant_id: m.id.clone(),
                raw: o.raw.clone(),
                parsed: o.parsed.clone(),
            })
        })
        .collect();
    io::write_jsonl(&dir.join(OUTCOMES_FILE), &lines)?;
    io::write_string(&dir.join(KILLS_FILE), &kill_matrix(matrix)?.to_csv())?;
    Ok(())
}

/// Reads back what [`write_run_dir`] wrote.
pub fn read_run_dir(dir: &Path) -> Result<(RunManifest, OutcomeMatrix), PipelineError> {
    let manifest: RunManifest =
        serde_json::from_str(&io::read_to_string(&dir.join(MANIFEST_FILE))?).map_err(FormatError::from)?;
    let baseline: Vec<BaselineOutcome> = io::read_jsonl(&dir.join(BASELINE_FILE))?;
    let mutants: Vec<MutantRef> = io::read_jsonl(&dir.join(MUTANTS_FILE))?;
    let passed_cases: Vec<PassedCase> = io::read_jsonl(&dir.join(PASSED_FILE))?;
    let lines: Vec<OutcomeLine> = io::read_jsonl(&dir.join(OUTCOMES_FILE))?;

    let column: std::collections::HashMap<&str, usize> =
        mutants.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
    let row_of: std::collections::HashMap<usize, usize> =
        passed_cases.iter().enumerate().map(|(i, c)| (c.case_index, i)).collect();
    let mut grid: Vec<Vec<Option<Outcome>>> = vec![vec![None; mutants.len()]; passed_cases.len()];
    for line in lines {
        let (Some(&r), Some(&c)) = (row_of.get(&line.case_index), column.get(line.mutant_id.as_str())) else {
            return Err(PipelineError::IncompleteMatrix(format!(
                "outcome for unknown cell (case {}, mutant {})",
                line.case_index, line.mutant_id
            )));
        };
        grid[r][c] = Some(Outcome {
            raw: line.raw,
            parsed: line.parsed,
        });
    }
    let mut outcomes = Vec::with_capacity(grid.len());
    for (r, row) in grid.into_iter().enumerate() {
        let row: Option<Vec<Outcome>> = row.into_iter().collect();
        outcomes.push(row.ok_or_else(|| {
            PipelineError::IncompleteMatrix(format!("case {} is missing outcomes", passed_cases[r].case_index))
        })?);
    }
    Ok((
        manifest,
        OutcomeMatrix {
            passed_cases,
            mutants,
            outcomes,
            baseline,
        },
    ))
}
