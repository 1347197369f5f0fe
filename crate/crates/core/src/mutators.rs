//! The six demonstration mutation operators and seeded mutant generation.
//!
//! Demonstration-level operators (NL, OL, BI) rewrite one demonstration's
//! label or input. Prompt-level operators (DS, OD, DR) reorder, replace or
//! repeat whole demonstrations. Each operator kind forms one mutant group.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::prompt::{DemoSet, Demonstration, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MutatorKind {
    #[serde(rename = "NL")]
    NoisyLabel,
    #[serde(rename = "OL")]
    OodLabel,
    #[serde(rename = "BI")]
    BlurredInput,
    #[serde(rename = "DS")]
    DemoShuffle,
    #[serde(rename = "OD")]
    OodDemo,
    #[serde(rename = "DR")]
    DemoRepetition,
}

impl MutatorKind {
    pub const ALL: [MutatorKind; 6] = [
        MutatorKind::NoisyLabel,
        MutatorKind::OodLabel,
        MutatorKind::BlurredInput,
        MutatorKind::DemoShuffle,
        MutatorKind::OodDemo,
        MutatorKind::DemoRepetition,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MutatorKind::NoisyLabel => "NL",
            MutatorKind::OodLabel => "OL",
            MutatorKind::BlurredInput => "BI",
            MutatorKind::DemoShuffle => "DS",
            MutatorKind::OodDemo => "OD",
            MutatorKind::DemoRepetition => "DR",
        }
    }

    /// Group index used by the group-wise scores.
    pub fn group_index(self) -> usize {
        self as usize
    }

    pub fn from_group_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    fn per_index(self) -> bool {
        self != MutatorKind::DemoShuffle
    }
}

impl fmt::Display for MutatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MutatorKind {
    type Err = MutationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| MutationError::InvalidConfig(format!("unknown mutator kind {s:?}")))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MutationError {
    #[error("demonstration index {index} out of range for {len} demonstrations")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("noisy label needs at least two labels")]
    SingletonLabelSet,
    #[error("ood label token {0:?} is one of the task labels")]
    OodTokenCollision(String),
    #[error("{kind} on demonstration {index} leaves the demonstrations unchanged")]
    NoOpMutant { kind: MutatorKind, index: usize },
    #[error("demo shuffle needs at least 2 demonstrations, got {0}")]
    TooFewDemos(usize),
    #[error("ood demonstration pool is empty")]
    EmptyPool,
    #[error("{kind}: requested {requested} mutants but only {available} distinct ones exist")]
    InsufficientMutants {
        kind: MutatorKind,
        requested: usize,
        available: usize,
    },
    #[error("invalid mutation config: {0}")]
    InvalidConfig(String),
}

/// A mutated demonstration set with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutant {
    pub id: String,
    pub kind: MutatorKind,
    pub group_index: usize,
    pub affected_indices: Vec<usize>,
    pub seed: u64,
    pub demos: DemoSet,
}

impl Mutant {
    fn new(kind: MutatorKind, ordinal: usize, affected_indices: Vec<usize>, seed: u64, demos: DemoSet) -> Self {
        Self {
            id: format!("{kind}-{ordinal}"),
            kind,
            group_index: kind.group_index(),
            affected_indices,
            seed,
            demos,
        }
    }
}

/// One foreign input-output pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodPair {
    pub input: String,
    pub output: String,
}

/// Foreign-task pairs used by the OOD demonstration operator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OodPool {
    pub pairs: Vec<OodPair>,
}

impl OodPool {
    pub fn new(pairs: Vec<OodPair>) -> Self {
        Self { pairs }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A fraction in (0, 1), written `"1/2"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlurFraction {
    numer: u32,
    denom: u32,
}

impl BlurFraction {
    pub const HALF: BlurFraction = BlurFraction { numer: 1, denom: 2 };

    pub fn new(numer: u32, denom: u32) -> Result<Self, MutationError> {
        if numer == 0 || denom == 0 || numer >= denom {
            return Err(MutationError::InvalidConfig(format!(
                "blur fraction {numer}/{denom} must lie strictly between 0 and 1"
            )));
        }
        Ok(Self { numer, denom })
    }

    /// `ceil(fraction * tokens)`, at least 1 when `tokens > 0`.
    pub fn kept_tokens(self, tokens: usize) -> usize {
        if tokens == 0 {
            return 0;
        }
        let kept = (tokens * self.numer as usize).div_ceil(self.denom as usize);
        kept.max(1)
    }
}

impl Default for BlurFraction {
    fn default() -> Self {
        Self::HALF
    }
}

impl TryFrom<String> for BlurFraction {
    type Error = MutationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let bad = || MutationError::InvalidConfig(format!("blur fraction {s:?} is not of the form \"n/d\""));
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        let n = n.trim().parse().map_err(|_| bad())?;
        let d = d.trim().parse().map_err(|_| bad())?;
        BlurFraction::new(n, d)
    }
}

impl From<BlurFraction> for String {
    fn from(f: BlurFraction) -> String {
        format!("{}/{}", f.numer, f.denom)
    }
}

fn default_mutants_per_operator() -> usize {
    20
}

fn default_repetition_count() -> usize {
    2
}

fn default_kinds() -> BTreeSet<MutatorKind> {
    MutatorKind::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationConfig {
    #[serde(default = "default_mutants_per_operator")]
    pub mutants_per_operator: usize,
    #[serde(default = "default_repetition_count")]
    pub repetition_count: usize,
    #[serde(default)]
    pub blur_fraction: BlurFraction,
    #[serde(default = "default_kinds")]
    pub enabled_kinds: BTreeSet<MutatorKind>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            mutants_per_operator: default_mutants_per_operator(),
            repetition_count: default_repetition_count(),
            blur_fraction: BlurFraction::HALF,
            enabled_kinds: default_kinds(),
            seed: 0,
        }
    }
}

impl MutationConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, crate::io::FormatError> {
        let config: MutationConfig = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), MutationError> {
        if self.mutants_per_operator == 0 {
            return Err(MutationError::InvalidConfig("mutants_per_operator must be at least 1".into()));
        }
        if self.repetition_count == 0 {
            return Err(MutationError::InvalidConfig("repetition_count must be at least 1".into()));
        }
        if self.enabled_kinds.is_empty() {
            return Err(MutationError::InvalidConfig("no mutator kinds enabled".into()));
        }
        Ok(())
    }
}

fn check_index(src: &DemoSet, index: usize) -> Result<(), MutationError> {
    if index >= src.len() {
        return Err(MutationError::IndexOutOfRange { index, len: src.len() });
    }
    Ok(())
}

fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one mutant, a function of `(base, kind, ordinal)` only.
pub fn derive_seed(base: u64, kind: MutatorKind, ordinal: u64) -> u64 {
    splitmix64(base ^ splitmix64(((kind.group_index() as u64 + 1) << 48) ^ ordinal))
}

/// Seed for the index-selection stream of one kind.
fn selection_seed(base: u64, kind: MutatorKind) -> u64 {
    derive_seed(base, kind, u64::MAX)
}

/// Replaces one label with a uniformly drawn different task label.
pub fn noisy_label(src: &DemoSet, task: &TaskSpec, index: usize, seed: u64) -> Result<Mutant, MutationError> {
    check_index(src, index)?;
    let original = &src.demos[index].label;
    let alternatives: Vec<&String> = task.labels.iter().filter(|l| *l != original).collect();
    if alternatives.is_empty() || task.labels.len() < 2 {
        return Err(MutationError::SingletonLabelSet);
    }
    let mut rng = rng_from(seed);
    let replacement = (*alternatives.choose(&mut rng).expect("non-empty")).clone();
    let mut demos = src.clone();
    demos.demos[index].label = replacement;
    Ok(Mutant::new(MutatorKind::NoisyLabel, index, vec![index], seed, demos))
}

/// Replaces one label with the task's OOD token.
pub fn ood_label(src: &DemoSet, task: &TaskSpec, index: usize) -> Result<Mutant, MutationError> {
    check_index(src, index)?;
    if task.labels.contains(&task.ood_label_token) {
        return Err(MutationError::OodTokenCollision(task.ood_label_token.clone()));
    }
    if src.demos[index].label == task.ood_label_token {
        return Err(MutationError::NoOpMutant {
            kind: MutatorKind::OodLabel,
            index,
        });
    }
    let mut demos = src.clone();
    demos.demos[index].label = task.ood_label_token.clone();
    Ok(Mutant::new(MutatorKind::OodLabel, index, vec![index], 0, demos))
}

/// Whitespace-token prefix keeping `fraction` of the tokens (ceil, min 1).
/// Returns `None` when nothing would be dropped.
pub fn blur_text(text: &str, fraction: BlurFraction) -> Option<String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let kept = fraction.kept_tokens(tokens.len());
    (kept < tokens.len()).then(|| tokens[..kept].join(" "))
}

/// Truncates every input field of one demonstration to its prefix.
pub fn blurred_input(
    src: &DemoSet,
    task: &TaskSpec,
    index: usize,
    fraction: BlurFraction,
) -> Result<Mutant, MutationError> {
    check_index(src, index)?;
    let mut demos = src.clone();
    let mut changed = false;
    let demo = &mut demos.demos[index];
    for field in &task.fields {
        if let Some(value) = demo.inputs.get_mut(field) {
            if let Some(blurred) = blur_text(value, fraction) {
                *value = blurred;
                changed = true;
            }
        }
    }
    if !changed {
        return Err(MutationError::NoOpMutant {
            kind: MutatorKind::BlurredInput,
            index,
        });
    }
    Ok(Mutant::new(MutatorKind::BlurredInput, index, vec![index], 0, demos))
}

fn draw_permutation(k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn apply_permutation(src: &DemoSet, perm: &[usize]) -> DemoSet {
    DemoSet::new(perm.iter().map(|&i| src.demos[i].clone()).collect())
}

const MAX_SHUFFLE_ATTEMPTS: usize = 10_000;

/// Reorders all demonstrations by a uniformly drawn non-identity permutation.
pub fn demo_shuffle(src: &DemoSet, seed: u64) -> Result<Mutant, MutationError> {
    let k = src.len();
    if k < 2 {
        return Err(MutationError::TooFewDemos(k));
    }
    let mut rng = rng_from(seed);
    for _ in 0..MAX_SHUFFLE_ATTEMPTS {
        let perm = draw_permutation(k, &mut rng);
        let demos = apply_permutation(src, &perm);
        if demos != *src {
            return Ok(Mutant::new(MutatorKind::DemoShuffle, 0, (0..k).collect(), seed, demos));
        }
    }
    Err(MutationError::NoOpMutant {
        kind: MutatorKind::DemoShuffle,
        index: 0,
    })
}

/// Replaces one demonstration with a foreign pair: the pair's input goes in
/// the task's first field, other fields are left empty, and the pair's output
/// becomes the label.
pub fn ood_demo(src: &DemoSet, task: &TaskSpec, pool: &OodPool, index: usize, seed: u64) -> Result<Mutant, MutationError> {
    check_index(src, index)?;
    let mut rng = rng_from(seed);
    let pair = pool.pairs.choose(&mut rng).ok_or(MutationError::EmptyPool)?;
    let inputs = task.fields.iter().enumerate().map(|(i, f)| {
        let value = if i == 0 { pair.input.clone() } else { String::new() };
        (f.clone(), value)
    });
    let replacement = Demonstration::new(inputs, pair.output.clone());
    if replacement == src.demos[index] {
        return Err(MutationError::NoOpMutant {
            kind: MutatorKind::OodDemo,
            index,
        });
    }
    let mut demos = src.clone();
    demos.demos[index] = replacement;
    Ok(Mutant::new(MutatorKind::OodDemo, index, vec![index], seed, demos))
}

/// Inserts `copies` duplicates of one demonstration right after it.
pub fn demo_repetition(src: &DemoSet, index: usize, copies: usize) -> Result<Mutant, MutationError> {
    check_index(src, index)?;
    if copies == 0 {
        return Err(MutationError::InvalidConfig("repetition count must be at least 1".into()));
    }
    let mut demos = src.demos.clone();
    let repeated = demos[index].clone();
    demos.splice(index + 1..index + 1, std::iter::repeat_n(repeated, copies));
    Ok(Mutant::new(
        MutatorKind::DemoRepetition,
        index,
        (index..=index + copies).collect(),
        0,
        DemoSet::new(demos),
    ))
}

/// A kind whose group came out smaller than requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub kind: MutatorKind,
    pub requested: usize,
    pub produced: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MutantSet {
    pub mutants: Vec<Mutant>,
    pub shortfalls: Vec<Shortfall>,
}

struct Generator<'a> {
    src: &'a DemoSet,
    task: &'a TaskSpec,
    config: &'a MutationConfig,
    pool: &'a OodPool,
}

impl Generator<'_> {
    fn apply(&self, kind: MutatorKind, index: usize, seed: u64) -> Result<Mutant, MutationError> {
        match kind {
            MutatorKind::NoisyLabel => noisy_label(self.src, self.task, index, seed),
            MutatorKind::OodLabel => ood_label(self.src, self.task, index),
            MutatorKind::BlurredInput => blurred_input(self.src, self.task, index, self.config.blur_fraction),
            MutatorKind::OodDemo => ood_demo(self.src, self.task, self.pool, index, seed),
            MutatorKind::DemoRepetition => demo_repetition(self.src, index, self.config.repetition_count),
            MutatorKind::DemoShuffle => unreachable!("shuffle is not per-index"),
        }
    }

    fn emit(
        &self,
        kind: MutatorKind,
        index: usize,
        out: &mut Vec<Mutant>,
        noop: &mut BTreeSet<usize>,
    ) -> Result<(), MutationError> {
        let ordinal = out.len();
        let seed = derive_seed(self.config.seed, kind, ordinal as u64);
        match self.apply(kind, index, seed) {
            Ok(mut m) => {
                m.id = format!("{kind}-{ordinal}");
                m.seed = seed;
                out.push(m);
                Ok(())
            }
            Err(MutationError::NoOpMutant { .. }) => {
                noop.insert(index);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn per_index(&self, kind: MutatorKind) -> Result<(Vec<Mutant>, Option<Shortfall>), MutationError> {
        let k = self.src.len();
        let want = self.config.mutants_per_operator;
        let mut select = rng_from(selection_seed(self.config.seed, kind));
        let mut out = Vec::with_capacity(want);
        let mut noop = BTreeSet::new();

        if k >= want {
            // Preferred indices first, the rest shuffled as fallbacks for no-ops.
            let mut order: Vec<usize> = if k == want {
                (0..k).collect()
            } else {
                rand::seq::index::sample(&mut select, k, want).into_vec()
            };
            let chosen: BTreeSet<usize> = order.iter().copied().collect();
            let mut rest: Vec<usize> = (0..k).filter(|i| !chosen.contains(i)).collect();
            rest.shuffle(&mut select);
            order.extend(rest);
            for index in order {
                if out.len() == want {
                    break;
                }
                self.emit(kind, index, &mut out, &mut noop)?;
            }
        } else {
            while out.len() < want && noop.len() < k {
                let index = select.random_range(0..k);
                if noop.contains(&index) {
                    continue;
                }
                self.emit(kind, index, &mut out, &mut noop)?;
            }
        }

        let shortfall = (out.len() < want).then_some(Shortfall {
            kind,
            requested: want,
            produced: out.len(),
        });
        if let Some(s) = &shortfall {
            log::warn!("{kind}: produced {} of {} mutants", s.produced, s.requested);
        }
        Ok((out, shortfall))
    }

    fn shuffles(&self) -> Result<Vec<Mutant>, MutationError> {
        let k = self.src.len();
        if k < 2 {
            return Err(MutationError::TooFewDemos(k));
        }
        let want = self.config.mutants_per_operator;
        let available = factorial_minus_one_capped(k, want);
        if available < want {
            return Err(MutationError::InsufficientMutants {
                kind: MutatorKind::DemoShuffle,
                requested: want,
                available,
            });
        }
        let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut out = Vec::with_capacity(want);
        for ordinal in 0..want {
            let seed = derive_seed(self.config.seed, MutatorKind::DemoShuffle, ordinal as u64);
            let mut rng = rng_from(seed);
            let mut attempts = 0;
            let (perm, demos) = loop {
                attempts += 1;
                if attempts > MAX_SHUFFLE_ATTEMPTS {
                    return Err(MutationError::InsufficientMutants {
                        kind: MutatorKind::DemoShuffle,
                        requested: want,
                        available: out.len(),
                    });
                }
                let perm = draw_permutation(k, &mut rng);
                if seen.contains(&perm) {
                    continue;
                }
                let demos = apply_permutation(self.src, &perm);
                if demos != *self.src {
                    break (perm, demos);
                }
            };
            seen.insert(perm);
            out.push(Mutant::new(MutatorKind::DemoShuffle, ordinal, (0..k).collect(), seed, demos));
        }
        Ok(out)
    }
}

/// `min(k! - 1, cap)` without overflow.
fn factorial_minus_one_capped(k: usize, cap: usize) -> usize {
    let mut f: usize = 1;
    for i in 2..=k {
        f = f.saturating_mul(i);
        if f > cap {
            return cap;
        }
    }
    f - 1
}

/// Generates `mutants_per_operator` mutants for every enabled kind.
///
/// Output is ordered by kind (NL, OL, BI, DS, OD, DR) then ordinal, and is a
/// pure function of the inputs: each mutant's randomness comes from a seed
/// derived from `(config.seed, kind, ordinal)`.
pub fn generate_mutants(
    src: &DemoSet,
    task: &TaskSpec,
    config: &MutationConfig,
    pool: &OodPool,
    parallelism: Parallelism,
) -> Result<MutantSet, MutationError> {
    config.validate()?;
    if src.is_empty() {
        return Err(MutationError::TooFewDemos(0));
    }
    if config.enabled_kinds.contains(&MutatorKind::OodDemo) && pool.is_empty() {
        return Err(MutationError::EmptyPool);
    }
    let gen = Generator { src, task, config, pool };
    let kinds: Vec<MutatorKind> = config.enabled_kinds.iter().copied().collect();
    let groups = parallelism.map(&kinds, |&kind| {
        if kind.per_index() {
            gen.per_index(kind)
        } else {
            gen.shuffles().map(|m| (m, None))
        }
    });
    let mut set = MutantSet::default();
    for group in groups {
        let (mutants, shortfall) = group?;
        set.mutants.extend(mutants);
        set.shortfalls.extend(shortfall);
    }
    Ok(set)
}
