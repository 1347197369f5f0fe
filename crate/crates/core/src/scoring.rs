//! Standard, group-wise and per-group mutation scores over a kill matrix.
//!
//! All scores are exact rationals. Only passed test cases appear as rows of a
//! [`KillMatrix`], so the case count used here is the number of cases the
//! original prompt classified correctly.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutators::MutatorKind;
use crate::pipeline::KillMatrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("no mutants to score")]
    NoMutants,
    #[error("no passed test cases; group-wise scores are undefined")]
    NoPassedCases,
    #[error("mutant group {0} is empty")]
    EmptyGroup(usize),
}

/// An exact fraction in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "ScoreRepr", try_from = "ScoreRepr")]
pub struct Score(Ratio<u64>);

#[derive(Serialize, Deserialize)]
struct ScoreRepr {
    numer: u64,
    denom: u64,
    value: f64,
}

impl From<Score> for ScoreRepr {
    fn from(s: Score) -> Self {
        Self {
            numer: *s.0.numer(),
            denom: *s.0.denom(),
            value: s.as_f64(),
        }
    }
}

impl TryFrom<ScoreRepr> for Score {
    type Error = String;

    fn try_from(r: ScoreRepr) -> Result<Self, String> {
        if r.denom == 0 || r.numer > r.denom {
            return Err(format!("{}/{} is not a fraction in [0, 1]", r.numer, r.denom));
        }
        Ok(Score::new(r.numer, r.denom))
    }
}

impl Score {
    pub fn new(numer: u64, denom: u64) -> Self {
        Self(Ratio::new(numer, denom))
    }

    pub fn zero() -> Self {
        Self(Ratio::from_integer(0))
    }

    pub fn ratio(self) -> Ratio<u64> {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Exact arithmetic mean of a non-empty list.
    pub fn mean(scores: &[Score]) -> Option<Score> {
        if scores.is_empty() {
            return None;
        }
        let sum = scores.iter().fold(Ratio::from_integer(0u64), |acc, s| acc + s.0);
        Some(Score(sum / scores.len() as u64))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}%", self.as_f64() * 100.0)
    }
}

/// Fraction of mutants killed by at least one passed case.
///
/// With no passed cases nothing can be killed, so the score is 0 (with a
/// warning) rather than an error.
pub fn standard_score(km: &KillMatrix) -> Result<Score, ScoreError> {
    let m = km.mutant_count();
    if m == 0 {
        return Err(ScoreError::NoMutants);
    }
    if km.case_count() == 0 {
        log::warn!("no passed test cases; standard mutation score is 0");
        return Ok(Score::zero());
    }
    Ok(Score::new(km.killed_mutants() as u64, m as u64))
}

/// Average over passed cases of the fraction of mutant groups each case kills.
pub fn group_score(km: &KillMatrix) -> Result<Score, ScoreError> {
    if km.mutant_count() == 0 {
        return Err(ScoreError::NoMutants);
    }
    let t = km.case_count();
    if t == 0 {
        return Err(ScoreError::NoPassedCases);
    }
    let groups = km.groups();
    let hits: usize = (0..t).map(|row| km.groups_killed_by(row).len()).sum();
    Ok(Score::new(hits as u64, (t * groups.len()) as u64))
}

/// Fraction of passed cases that kill at least one mutant of `group`.
pub fn individual_group_score(km: &KillMatrix, group: usize) -> Result<Score, ScoreError> {
    let columns = km.columns_of_group(group);
    if columns.is_empty() {
        return Err(ScoreError::EmptyGroup(group));
    }
    let t = km.case_count();
    if t == 0 {
        return Err(ScoreError::NoPassedCases);
    }
    let hits = (0..t).filter(|&row| columns.iter().any(|&c| km.is_killed(row, c))).count();
    Ok(Score::new(hits as u64, t as u64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub ms_standard: Score,
    pub ms_group: Score,
    /// Keyed by group index.
    pub per_group: BTreeMap<usize, Score>,
    pub killed_mutants: usize,
    pub total_mutants: usize,
    pub passed_cases: usize,
    pub groups: usize,
}

pub fn score_report(km: &KillMatrix) -> Result<ScoreReport, ScoreError> {
    let per_group = km
        .groups()
        .into_iter()
        .map(|g| individual_group_score(km, g).map(|s| (g, s)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    Ok(ScoreReport {
        ms_standard: standard_score(km)?,
        ms_group: group_score(km)?,
        killed_mutants: km.killed_mutants(),
        total_mutants: km.mutant_count(),
        passed_cases: km.case_count(),
        groups: per_group.len(),
        per_group,
    })
}

impl ScoreReport {
    pub const CSV_HEADER: &'static str = "ms_standard,ms_group,NL,OL,BI,DS,OD,DR";

    /// One data row: the two aggregate scores then one column per operator
    /// group in NL, OL, BI, DS, OD, DR order; absent groups are left blank.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.ms_standard.as_f64().to_string(), self.ms_group.as_f64().to_string()];
        for kind in MutatorKind::ALL {
            cols.push(
                self.per_group
                    .get(&kind.group_index())
                    .map(|s| s.as_f64().to_string())
                    .unwrap_or_default(),
            );
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}
