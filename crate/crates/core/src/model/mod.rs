//! Model interface: one call classifies one query under one demonstration set.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{parse_label, render_query, DemoSet, ParsedLabel, PromptError, PromptPrefix, TaskSpec, TestCase};

pub mod cache;
pub mod mock;
pub mod remote;

pub use cache::{cache_gc, Cache, CacheEntry, CacheError, CacheKey, GcPolicy, GcStats, KeyHasher, KeyMaterial};
pub use mock::{mock_predict, MockModel};
pub use remote::{ModelEndpoint, RemoteModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("endpoint error (status {status:?}): {message}")]
    Endpoint { status: Option<u16>, message: String },
    #[error("authentication rejected (status {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("cannot predict from an empty demonstration set")]
    EmptyDemoSet,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Remote,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub parsed: ParsedLabel,
    pub raw: String,
    pub source: Source,
    pub latency: Duration,
}

/// Anything that answers an ICL prompt.
///
/// Remote models only look at the rendered prompt; the structured demos and
/// query are passed as well so offline models need not re-parse text.
pub trait IclModel: Send + Sync {
    /// Stable identity; part of every cache key.
    fn identity(&self) -> String;

    fn decoding_params(&self) -> String {
        String::new()
    }

    fn source(&self) -> Source;

    fn respond(&self, task: &TaskSpec, demos: &DemoSet, query: &TestCase, prompt: &str) -> Result<String, ModelError>;

    /// Binds the model to one demonstration set. Models that can precompute
    /// something per set override this.
    fn session<'a>(&'a self, task: &'a TaskSpec, demos: &'a DemoSet) -> Box<dyn Session + 'a> {
        Box::new(PlainSession { model: self, task, demos })
    }
}

/// Answers queries against a fixed demonstration set.
pub trait Session: Send + Sync {
    fn respond(&self, query: &TestCase, prompt: &str) -> Result<String, ModelError>;
}

struct PlainSession<'a, M: ?Sized> {
    model: &'a M,
    task: &'a TaskSpec,
    demos: &'a DemoSet,
}

impl<M: IclModel + ?Sized> Session for PlainSession<'_, M> {
    fn respond(&self, query: &TestCase, prompt: &str) -> Result<String, ModelError> {
        self.model.respond(self.task, self.demos, query, prompt)
    }
}

/// Renders the prompt, answers it from `cache` when possible, otherwise asks
/// the model and stores the raw completion.
pub fn classify(
    model: &dyn IclModel,
    task: &TaskSpec,
    demos: &DemoSet,
    query: &TestCase,
    cache: &Cache,
) -> Result<Prediction, ModelError> {
    Classifier::new(model, task, demos, cache)?.classify(query)
}

/// [`classify`] for many queries against one demonstration set: the
/// demonstrations are rendered and hashed once.
pub struct Classifier<'a> {
    model: &'a dyn IclModel,
    session: Box<dyn Session + 'a>,
    task: &'a TaskSpec,
    cache: &'a Cache,
    identity: String,
    params: String,
    prefix: PromptPrefix,
    hasher: KeyHasher,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a dyn IclModel, task: &'a TaskSpec, demos: &'a DemoSet, cache: &'a Cache) -> Result<Self, ModelError> {
        let prefix = PromptPrefix::new(task, demos)?;
        let identity = model.identity();
        let params = model.decoding_params();
        let mut hasher = KeyHasher::new(&identity, &params);
        hasher.update(prefix.as_str());
        Ok(Self {
            model,
            session: model.session(task, demos),
            task,
            cache,
            identity,
            params,
            prefix,
            hasher,
        })
    }

    pub fn classify(&self, query: &TestCase) -> Result<Prediction, ModelError> {
        let started = Instant::now();
        let suffix = render_query(self.task, query)?;
        let mut hasher = self.hasher.clone();
        hasher.update(&suffix);
        let key = hasher.finish();
        if let Some(raw) = self.cache.get(&key)? {
            return Ok(Prediction {
                parsed: parse_label(&raw, self.task),
                raw,
                source: Source::Cache,
                latency: started.elapsed(),
            });
        }
        let prompt = format!("{}{suffix}", self.prefix.as_str());
        let raw = self.session.respond(query, &prompt)?;
        let material = KeyMaterial {
            model: self.identity.clone(),
            params: self.params.clone(),
            prompt,
        };
        self.cache.put(&key, material, &raw)?;
        Ok(Prediction {
            parsed: parse_label(&raw, self.task),
            raw,
            source: self.model.source(),
            latency: started.elapsed(),
        })
    }
}
