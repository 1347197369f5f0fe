//! Task, demonstration and prompt data model.
//!
//! A prompt is the system prompt followed by each demonstration rendered as
//! `Field: value` lines plus an `Answer: label` line, demonstrations separated
//! by one blank line, and finally the query fields with a bare `Answer:`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label emitted by the out-of-distribution label mutator unless overridden.
pub const DEFAULT_OOD_LABEL: &str = "&";

fn default_ood_label() -> String {
    DEFAULT_OOD_LABEL.to_string()
}

/// A classification task: instructions, input schema and label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub system_prompt: String,
    /// Input field names in rendering order.
    pub fields: Vec<String>,
    pub answer_field: String,
    pub labels: Vec<String>,
    #[serde(default = "default_ood_label")]
    pub ood_label_token: String,
}

/// One way a [`TaskSpec`] can be malformed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskViolation {
    DuplicateLabel(String),
    EmptyLabel,
    TooFewLabels(usize),
    OodTokenCollision(String),
    EmptyOodToken,
    NoFields,
    DuplicateField(String),
    AnswerFieldCollision(String),
}

impl fmt::Display for TaskViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DuplicateLabel(l) => write!(f, "label {l:?} appears more than once"),
            Self::EmptyLabel => write!(f, "labels must be non-empty strings"),
            Self::TooFewLabels(n) => write!(f, "a task needs at least 2 labels, found {n}"),
            Self::OodTokenCollision(t) => write!(f, "ood label token {t:?} is also a task label"),
            Self::EmptyOodToken => write!(f, "ood label token must be non-empty"),
            Self::NoFields => write!(f, "a task needs at least one input field"),
            Self::DuplicateField(name) => write!(f, "field {name:?} appears more than once"),
            Self::AnswerFieldCollision(name) => {
                write!(f, "answer field {name:?} is also an input field")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("{what} does not match the task schema: {detail}")]
    SchemaMismatch { what: String, detail: String },
    #[error("invalid task: {}", join_violations(.0))]
    InvalidTask(Vec<TaskViolation>),
}

fn join_violations(v: &[TaskViolation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn duplicates(items: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    items
        .iter()
        .filter(|s| !seen.insert(s.as_str()) && reported.insert(s.as_str()))
        .cloned()
        .collect()
}

/// Returns every invariant violation of `task`; empty iff the task is valid.
pub fn validate_task(task: &TaskSpec) -> Vec<TaskViolation> {
    let mut out = Vec::new();
    if task.labels.len() < 2 {
        out.push(TaskViolation::TooFewLabels(task.labels.len()));
    }
    if task.labels.iter().any(String::is_empty) {
        out.push(TaskViolation::EmptyLabel);
    }
    for label in duplicates(&task.labels) {
        out.push(TaskViolation::DuplicateLabel(label));
    }
    if task.ood_label_token.is_empty() {
        out.push(TaskViolation::EmptyOodToken);
    } else if task.labels.contains(&task.ood_label_token) {
        out.push(TaskViolation::OodTokenCollision(task.ood_label_token.clone()));
    }
    if task.fields.is_empty() {
        out.push(TaskViolation::NoFields);
    }
    for field in duplicates(&task.fields) {
        out.push(TaskViolation::DuplicateField(field));
    }
    if task.fields.contains(&task.answer_field) {
        out.push(TaskViolation::AnswerFieldCollision(task.answer_field.clone()));
    }
    out
}

impl TaskSpec {
    /// Parses a TOML task manifest and validates it.
    pub fn from_toml_str(s: &str) -> Result<Self, crate::io::FormatError> {
        let task: TaskSpec = toml::from_str(s)?;
        task.validated().map_err(Into::into)
    }

    pub fn validated(self) -> Result<Self, PromptError> {
        let violations = validate_task(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(PromptError::InvalidTask(violations))
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn first_field(&self) -> &str {
        &self.fields[0]
    }
}

/// One input-label pair placed in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Demonstration {
    pub inputs: BTreeMap<String, String>,
    pub label: String,
}

impl Demonstration {
    pub fn new<K, V>(inputs: impl IntoIterator<Item = (K, V)>, label: impl Into<String>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            inputs: inputs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            label: label.into(),
        }
    }
}

/// Ordered demonstrations; order is part of the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemoSet {
    pub demos: Vec<Demonstration>,
}

impl DemoSet {
    pub fn new(demos: Vec<Demonstration>) -> Self {
        Self { demos }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Demonstration> {
        self.demos.iter()
    }

    /// Hex SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("demo set serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

impl From<Vec<Demonstration>> for DemoSet {
    fn from(demos: Vec<Demonstration>) -> Self {
        Self { demos }
    }
}

/// A query with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub inputs: BTreeMap<String, String>,
    pub label: String,
}

impl TestCase {
    pub fn new<K, V>(inputs: impl IntoIterator<Item = (K, V)>, label: impl Into<String>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            inputs: inputs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            label: label.into(),
        }
    }
}

/// Result of reducing a raw completion to a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label")]
pub enum ParsedLabel {
    Label(String),
    Unparseable,
}

impl ParsedLabel {
    pub fn is(&self, label: &str) -> bool {
        matches!(self, ParsedLabel::Label(l) if l == label)
    }
}

impl fmt::Display for ParsedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParsedLabel::Label(l) => f.write_str(l),
            ParsedLabel::Unparseable => f.write_str("<unparseable>"),
        }
    }
}

fn check_inputs(
    task: &TaskSpec,
    inputs: &BTreeMap<String, String>,
    what: impl FnOnce() -> String,
) -> Result<(), PromptError> {
    if let Some(missing) = task.fields.iter().find(|f| !inputs.contains_key(*f)) {
        return Err(PromptError::SchemaMismatch {
            what: what(),
            detail: format!("missing field {missing:?}"),
        });
    }
    if let Some(extra) = inputs.keys().find(|k| !task.fields.contains(k)) {
        return Err(PromptError::SchemaMismatch {
            what: what(),
            detail: format!("unexpected field {extra:?}"),
        });
    }
    Ok(())
}

/// Checks that every demonstration and the query carry exactly the task fields.
pub fn check_schema(task: &TaskSpec, demos: &DemoSet, query: &TestCase) -> Result<(), PromptError> {
    check_demos(task, demos)?;
    check_inputs(task, &query.inputs, || "query".to_string())
}

fn check_demos(task: &TaskSpec, demos: &DemoSet) -> Result<(), PromptError> {
    for (i, demo) in demos.iter().enumerate() {
        check_inputs(task, &demo.inputs, || format!("demonstration {i}"))?;
    }
    Ok(())
}

/// Renders the full ICL prompt for `query`.
///
/// An empty system prompt is omitted entirely, so the prompt starts with the
/// first demonstration.
pub fn render_prompt(task: &TaskSpec, demos: &DemoSet, query: &TestCase) -> Result<String, PromptError> {
    let prefix = PromptPrefix::new(task, demos)?;
    let mut out = prefix.text;
    out.push_str(&render_query(task, query)?);
    Ok(out)
}

/// System prompt and demonstrations, rendered once and shared by every query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPrefix {
    text: String,
}

impl PromptPrefix {
    pub fn new(task: &TaskSpec, demos: &DemoSet) -> Result<Self, PromptError> {
        check_demos(task, demos)?;
        let mut text = String::new();
        if !task.system_prompt.is_empty() {
            text.push_str(&task.system_prompt);
            text.push('\n');
        }
        for demo in demos.iter() {
            push_fields(&mut text, task, &demo.inputs);
            text.push_str(&task.answer_field);
            text.push_str(": ");
            text.push_str(&demo.label);
            text.push_str("\n\n");
        }
        Ok(Self { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// The query block that closes a prompt, ending in the bare answer field.
pub fn render_query(task: &TaskSpec, query: &TestCase) -> Result<String, PromptError> {
    check_inputs(task, &query.inputs, || "query".to_string())?;
    let mut out = String::new();
    push_fields(&mut out, task, &query.inputs);
    out.push_str(&task.answer_field);
    out.push(':');
    Ok(out)
}

fn push_fields(out: &mut String, task: &TaskSpec, inputs: &BTreeMap<String, String>) {
    for field in &task.fields {
        out.push_str(field);
        out.push_str(": ");
        out.push_str(&inputs[field]);
        out.push('\n');
    }
}

/// Reduces a raw completion to a label: the longest label (or the OOD token)
/// that prefixes the trimmed text, matched case-sensitively.
pub fn parse_label(raw: &str, task: &TaskSpec) -> ParsedLabel {
    let trimmed = raw.trim();
    task.labels
        .iter()
        .chain(std::iter::once(&task.ood_label_token))
        .filter(|l| !l.is_empty() && trimmed.starts_with(l.as_str()))
        .max_by_key(|l| l.len())
        .map(|l| ParsedLabel::Label(l.clone()))
        .unwrap_or(ParsedLabel::Unparseable)
}
