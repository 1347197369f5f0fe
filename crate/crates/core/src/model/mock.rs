//! Deterministic token-overlap stand-in for an LLM.
//!
//! The mock answers with the label of the demonstration sharing the most
//! distinct lowercase whitespace tokens with the query. Ties go to the latest
//! demonstration in the prompt, and when nothing overlaps it copies the last
//! demonstration's label. That makes its output depend on labels, inputs and
//! order, so every operator family can change a prediction.

use std::borrow::Cow;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::prompt::{DemoSet, TaskSpec, TestCase};

use super::{IclModel, ModelError, Session, Source};

fn lowercase(token: &str) -> Cow<'_, str> {
    if token.chars().any(char::is_uppercase) {
        Cow::Owned(token.to_lowercase())
    } else {
        Cow::Borrowed(token)
    }
}

fn tokens<'a>(values: impl Iterator<Item = &'a String>) -> impl Iterator<Item = Cow<'a, str>> {
    values.flat_map(|v| v.split_whitespace()).map(lowercase)
}

/// Label the mock model answers with for `query` under `demos`.
pub fn mock_predict(demos: &DemoSet, query: &TestCase) -> Result<String, ModelError> {
    let last = demos.demos.last().ok_or(ModelError::EmptyDemoSet)?;
    let mut query_tokens: Vec<Cow<'_, str>> = tokens(query.inputs.values()).collect();
    query_tokens.sort_unstable();
    query_tokens.dedup();
    let mut best: Option<(usize, &str)> = None;
    let mut demo_tokens: Vec<Cow<'_, str>> = Vec::new();
    for demo in demos.iter() {
        demo_tokens.clear();
        demo_tokens.extend(tokens(demo.inputs.values()));
        // Distinct shared tokens: each query token counts once.
        let score = query_tokens.iter().filter(|t| demo_tokens.contains(t)).count();
        if best.is_none_or(|(s, _)| score >= s) {
            best = Some((score, &demo.label));
        }
    }
    match best {
        Some((score, label)) if score > 0 => Ok(label.to_string()),
        _ => Ok(last.label.clone()),
    }
}

/// [`mock_predict`] behind the model interface, counting invocations.
#[derive(Debug, Default)]
pub struct MockModel {
    calls: AtomicUsize,
}

impl MockModel {
    pub const IDENTITY: &'static str = "mock:token-overlap/v1";

    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times the model was actually asked (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl IclModel for MockModel {
    fn identity(&self) -> String {
        Self::IDENTITY.to_string()
    }

    fn source(&self) -> Source {
        Source::Mock
    }

    fn respond(&self, _task: &TaskSpec, demos: &DemoSet, query: &TestCase, _prompt: &str) -> Result<String, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        mock_predict(demos, query)
    }

    fn session<'a>(&'a self, _task: &'a TaskSpec, demos: &'a DemoSet) -> Box<dyn Session + 'a> {
        Box::new(MockSession {
            calls: &self.calls,
            demos: demos.iter().map(|d| (token_set(d.inputs.values()), d.label.as_str())).collect(),
        })
    }
}

/// Sorted distinct lowercase tokens.
fn token_set<'a>(values: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut out: Vec<String> = tokens(values).map(Cow::into_owned).collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn shared_count(a: &[String], b: &[String]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Same answers as [`mock_predict`], with the demonstrations tokenized once.
struct MockSession<'a> {
    calls: &'a AtomicUsize,
    demos: Vec<(Vec<String>, &'a str)>,
}

impl Session for MockSession<'_> {
    fn respond(&self, query: &TestCase, _prompt: &str) -> Result<String, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (_, last) = self.demos.last().ok_or(ModelError::EmptyDemoSet)?;
        let q = token_set(query.inputs.values());
        let mut best = (0, *last);
        for (tokens, label) in &self.demos {
            let score = shared_count(tokens, &q);
            if score > 0 && score >= best.0 {
                best = (score, label);
            }
        }
        Ok(best.1.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Demonstration;

    fn demo(text: &str, label: &str) -> Demonstration {
        Demonstration::new([("Text", text)], label)
    }

    fn q(text: &str) -> TestCase {
        TestCase::new([("Text", text)], "POS")
    }

    #[test]
    fn picks_highest_overlap() {
        let demos = DemoSet::new(vec![demo("good movie great", "POS"), demo("bad film awful", "NEG")]);
        assert_eq!(mock_predict(&demos, &q("great movie")).unwrap(), "POS");
    }

    #[test]
    fn copies_flipped_label() {
        let demos = DemoSet::new(vec![demo("good movie great", "NEG"), demo("bad film awful", "NEG")]);
        assert_eq!(mock_predict(&demos, &q("great movie")).unwrap(), "NEG");
    }

    #[test]
    fn zero_overlap_uses_last_demo() {
        let demos = DemoSet::new(vec![demo("bad film awful", "NEG"), demo("good movie great", "POS")]);
        assert_eq!(mock_predict(&demos, &q("the plot")).unwrap(), "POS");
        let swapped = DemoSet::new(vec![demos.demos[1].clone(), demos.demos[0].clone()]);
        assert_eq!(mock_predict(&swapped, &q("the plot")).unwrap(), "NEG");
    }

    #[test]
    fn ties_go_to_latest() {
        let demos = DemoSet::new(vec![demo("alpha beta", "A"), demo("alpha gamma", "B")]);
        assert_eq!(mock_predict(&demos, &q("alpha")).unwrap(), "B");
    }

    #[test]
    fn case_insensitive_set_overlap() {
        // Repeated query tokens count once.
        let demos = DemoSet::new(vec![demo("Great great", "A"), demo("fine day", "B")]);
        assert_eq!(mock_predict(&demos, &q("GREAT great great day")).unwrap(), "B");
    }

    #[test]
    fn session_agrees_with_reference() {
        let task = TaskSpec {
            name: "t".into(),
            system_prompt: String::new(),
            fields: vec!["Text".into()],
            answer_field: "Answer".into(),
            labels: vec!["A".into(), "B".into()],
            ood_label_token: "&".into(),
        };
        let demos = DemoSet::new(vec![
            demo("Great great day", "A"),
            demo("fine day", "B"),
            demo("alpha beta", "A"),
            demo("alpha gamma", "B"),
        ]);
        let model = MockModel::new();
        let session = model.session(&task, &demos);
        for text in ["GREAT great great day", "alpha", "nothing here", "beta gamma day", "fine great"] {
            assert_eq!(session.respond(&q(text), "").unwrap(), mock_predict(&demos, &q(text)).unwrap(), "{text}");
        }
        assert_eq!(model.calls(), 5);
        let empty = DemoSet::new(vec![]);
        assert!(model.session(&task, &empty).respond(&q("x"), "").is_err());
    }

    #[test]
    fn empty_demos() {
        assert!(matches!(
            mock_predict(&DemoSet::new(vec![]), &q("x")),
            Err(ModelError::EmptyDemoSet)
        ));
    }
}
