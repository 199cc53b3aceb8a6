//! In-process backends: a scripted stub and a cache-only replay backend.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    Backend, BackendFailure, BackendResult, QueryRequest, TextGenerator, TokenDistribution, TopK,
    YesNoMass,
};

/// Returns fixed answers. Optionally fails the first `n` calls transiently.
#[derive(Debug)]
pub struct StubBackend {
    id: String,
    distribution: Vec<(String, f64)>,
    forced: YesNoMass,
    fail_first: AtomicUsize,
    calls: AtomicUsize,
}

impl StubBackend {
    pub fn new(id: impl Into<String>) -> Self {
        StubBackend {
            id: id.into(),
            distribution: Vec::new(),
            forced: YesNoMass::new(0.0, 0.0),
            fail_first: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_distribution(mut self, entries: Vec<(String, f64)>) -> Self {
        self.distribution = entries;
        self
    }

    pub fn with_forced(mut self, mass: YesNoMass) -> Self {
        self.forced = mass;
        self
    }

    pub fn failing_first(self, n: usize) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) -> BackendResult<()> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let failed = self
            .fail_first
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        match failed {
            Ok(_) => Err(BackendFailure::transient("scripted transient failure")),
            Err(_) => Ok(()),
        }
    }
}

impl Backend for StubBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn next_token(&self, request: &QueryRequest<'_>) -> BackendResult<TopK> {
        self.tick()?;
        let distribution =
            TokenDistribution::new(self.distribution.clone(), request.prompt.decoding().top_k)?;
        Ok(TopK {
            distribution,
            converted: false,
        })
    }

    fn forced_pair(&self, _request: &QueryRequest<'_>) -> BackendResult<YesNoMass> {
        self.tick()?;
        Ok(self.forced)
    }
}

/// Answers only from the cache; every query reaching it is a miss.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    id: String,
    subject_dependent: bool,
}

impl ReplayBackend {
    /// `id` must be the id of the backend that recorded the cache.
    pub fn new(id: impl Into<String>) -> Self {
        ReplayBackend {
            id: id.into(),
            subject_dependent: false,
        }
    }

    /// Must match the recording backend, since it changes the cache keys.
    pub fn with_subject_dependence(mut self, dependent: bool) -> Self {
        self.subject_dependent = dependent;
        self
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn subject_dependent(&self) -> bool {
        self.subject_dependent
    }

    fn next_token(&self, request: &QueryRequest<'_>) -> BackendResult<TopK> {
        Err(BackendFailure::fatal(format!(
            "cache miss in replay mode for prompt {}",
            request.prompt.canonical_hash()
        )))
    }

    fn forced_pair(&self, request: &QueryRequest<'_>) -> BackendResult<YesNoMass> {
        Err(BackendFailure::fatal(format!(
            "cache miss in replay mode for prompt {}",
            request.prompt.canonical_hash()
        )))
    }
}

impl TextGenerator for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, _system: &str, _user: &str, _t: f64, seed: u64) -> BackendResult<String> {
        Err(BackendFailure::fatal(format!(
            "cache miss in replay mode for generation with seed {seed}"
        )))
    }
}

/// Plays back scripted generation responses in call order.
#[derive(Debug)]
pub struct StubGenerator {
    id: String,
    responses: Mutex<std::collections::VecDeque<String>>,
    calls: AtomicUsize,
}

impl StubGenerator {
    pub fn new(id: impl Into<String>, responses: Vec<String>) -> Self {
        StubGenerator {
            id: id.into(),
            responses: Mutex::new(responses.into()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TextGenerator for StubGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, _system: &str, _user: &str, _t: f64, _seed: u64) -> BackendResult<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .lock()
            .expect("stub generator lock")
            .pop_front()
            .ok_or_else(|| BackendFailure::fatal("stub generator exhausted"))
    }
}
