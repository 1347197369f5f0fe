//! Mutation testing for in-context-learning classifiers.
//!
//! A test suite for an ICL prompt is judged by how many mutated prompts it
//! can tell apart from the original. The crate renders prompts
//! ([`prompt`]), mutates demonstration sets ([`mutators`]), queries a model
//! through a cache ([`model`]), builds kill matrices ([`pipeline`]), scores
//! them ([`scoring`]) and runs test-set quality experiments ([`experiments`]).

pub mod exec;
pub mod experiments;
pub mod fixtures;
pub mod io;
pub mod model;
pub mod mutators;
pub mod pipeline;
pub mod prompt;
pub mod scoring;

pub use exec::Parallelism;
pub use model::{classify, Cache, IclModel, MockModel, ModelEndpoint, ModelError, Prediction, RemoteModel, Source};
pub use mutators::{generate_mutants, MutantSet, Mutant, MutationConfig, MutationError, MutatorKind, OodPair, OodPool};
pub use pipeline::{kill_matrix, run_evaluation, KillMatrix, OutcomeMatrix, PipelineError, RunManifest};
pub use prompt::{parse_label, render_prompt, validate_task, DemoSet, Demonstration, ParsedLabel, TaskSpec, TestCase};
pub use scoring::{group_score, individual_group_score, score_report, standard_score, Score, ScoreReport};
