//! Bundled synthetic tasks for offline runs.
//!
//! The corpus lives in `fixtures/` next to the crate manifest and is embedded
//! at compile time. Its vocabulary is invented, so under [`crate::MockModel`]
//! every prediction follows from the overlaps the generator script planted.
//! `topic` is the four-class task; the others are binary.

use std::path::Path;

use crate::io::parse_jsonl;
use crate::mutators::OodPool;
use crate::prompt::{DemoSet, TaskSpec, TestCase};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub task: TaskSpec,
    pub demos: DemoSet,
    pub dataset: Vec<TestCase>,
}

pub const NAMES: [&str; 4] = ["topic", "sentiment", "entailment", "paraphrase"];

macro_rules! embedded {
    ($dir:literal) => {
        (
            include_str!(concat!("../fixtures/", $dir, "/task.toml")),
            include_str!(concat!("../fixtures/", $dir, "/demos.jsonl")),
            include_str!(concat!("../fixtures/", $dir, "/dataset.jsonl")),
        )
    };
}

fn build(name: &str, (task, demos, dataset): (&str, &str, &str)) -> Fixture {
    let origin = Path::new("fixtures").join(name);
    Fixture {
        task: TaskSpec::from_toml_str(task).expect("bundled task parses"),
        demos: DemoSet::new(parse_jsonl(demos, &origin.join("demos.jsonl")).expect("bundled demos parse")),
        dataset: parse_jsonl(dataset, &origin.join("dataset.jsonl")).expect("bundled dataset parses"),
    }
}

/// Looks a fixture up by name.
pub fn fixture(name: &str) -> Option<Fixture> {
    Some(match name {
        "topic" => build(name, embedded!("topic")),
        "sentiment" => build(name, embedded!("sentiment")),
        "entailment" => build(name, embedded!("entailment")),
        "paraphrase" => build(name, embedded!("paraphrase")),
        _ => return None,
    })
}

pub fn topic() -> Fixture {
    fixture("topic").expect("bundled")
}

/// English sentences with French translations as labels.
pub fn ood_pool() -> OodPool {
    let text = include_str!("../fixtures/ood_pool.jsonl");
    OodPool::new(parse_jsonl(text, Path::new("fixtures/ood_pool.jsonl")).expect("bundled pool parses"))
}
