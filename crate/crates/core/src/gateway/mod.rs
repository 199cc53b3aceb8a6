//! Next-token probability readout from model backends.
//!
//! The [`Gateway`] wraps a [`Backend`] with a content-addressed record cache
//! and bounded retries. Backends return either a truncated top-k distribution
//! or a forced yes/no probability pair; both reduce to a [`YesNoMass`].

mod cache;
mod http;
mod stub;

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{DecodingParams, QueryMode, RenderedPrompt};
use crate::seeding::sha256_hex;

pub use cache::{GenerationRecord, RecordCache};
pub use http::{OpenAiBackend, OpenAiConfig};
pub use stub::{ReplayBackend, StubBackend, StubGenerator};

const PROB_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// Truncated next-token distribution, sorted by probability descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<TokenProb>,
    k: usize,
    /// True when the listed entries do not exhaust the probability mass.
    truncated: bool,
}

impl TokenDistribution {
    pub fn new(entries: Vec<(String, f64)>, k: usize) -> Result<Self> {
        if entries.len() > k {
            return Err(Error::Distribution(format!(
                "rank overflow: {} entries for k = {k}",
                entries.len()
            )));
        }
        let mut entries: Vec<TokenProb> = entries
            .into_iter()
            .map(|(token, prob)| TokenProb { token, prob })
            .collect();
        for e in &entries {
            if !(e.prob > 0.0 && e.prob <= 1.0) {
                return Err(Error::Distribution(format!(
                    "probability {} for token {:?} outside (0, 1]",
                    e.prob, e.token
                )));
            }
        }
        entries.sort_by(|a, b| {
            b.prob
                .total_cmp(&a.prob)
                .then_with(|| a.token.cmp(&b.token))
        });
        let total: f64 = entries.iter().map(|e| e.prob).sum();
        if total > 1.0 + PROB_SLACK {
            return Err(Error::Distribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(TokenDistribution {
            entries,
            k,
            truncated: total < 1.0 - PROB_SLACK,
        })
    }

    /// Builds from natural-log probabilities; entries that underflow to zero are dropped.
    pub fn from_logprobs(entries: Vec<(String, f64)>, k: usize) -> Result<Self> {
        if entries.len() > k {
            return Err(Error::Distribution(format!(
                "rank overflow: {} entries for k = {k}",
                entries.len()
            )));
        }
        let converted = entries
            .into_iter()
            .map(|(t, lp)| (t, lp.exp().min(1.0)))
            .filter(|(_, p)| *p > 0.0)
            .collect();
        Self::new(converted, k)
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.prob).sum()
    }
}

/// Raw probability mass on "yes" and "no" variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YesNoMass {
    pub p_yes_raw: f64,
    pub p_no_raw: f64,
}

impl YesNoMass {
    pub fn new(p_yes_raw: f64, p_no_raw: f64) -> Self {
        YesNoMass { p_yes_raw, p_no_raw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Yes,
    No,
    Other,
}

/// A token counts as "yes" ("no") iff it equals that word after trimming
/// whitespace and case-folding. Punctuated forms such as "yes." do not count.
pub fn classify_token(token: &str) -> TokenClass {
    let folded = token.trim().to_lowercase();
    match folded.as_str() {
        "yes" => TokenClass::Yes,
        "no" => TokenClass::No,
        _ => TokenClass::Other,
    }
}

pub fn extract_yes_no(dist: &TokenDistribution) -> YesNoMass {
    let mut mass = YesNoMass::new(0.0, 0.0);
    for e in dist.entries() {
        match classify_token(&e.token) {
            TokenClass::Yes => mass.p_yes_raw += e.prob,
            TokenClass::No => mass.p_no_raw += e.prob,
            TokenClass::Other => {}
        }
    }
    mass
}

/// Who a query is about. Only subject-dependent backends (the synthetic
/// oracle) look at it; it then becomes part of the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySubject {
    pub respondent_id: Option<String>,
    pub target_id: String,
    /// Gold answer in {0, 1}, or the population yes-mean when no respondent applies.
    pub gold: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub prompt: &'a RenderedPrompt,
    pub subject: Option<&'a QuerySubject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QueryOutcome {
    Distribution {
        distribution: TokenDistribution,
        converted_from_logprobs: bool,
    },
    ForcedPair {
        mass: YesNoMass,
    },
}

impl QueryOutcome {
    pub fn mass(&self) -> YesNoMass {
        match self {
            QueryOutcome::Distribution { distribution, .. } => extract_yes_no(distribution),
            QueryOutcome::ForcedPair { mass } => *mass,
        }
    }

    pub fn distribution(&self) -> Option<&TokenDistribution> {
        match self {
            QueryOutcome::Distribution { distribution, .. } => Some(distribution),
            QueryOutcome::ForcedPair { .. } => None,
        }
    }
}

/// One resolved backend query, as stored in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub key: String,
    pub canonical_hash: String,
    pub backend_id: String,
    pub decoding: DecodingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<QuerySubject>,
    pub outcome: QueryOutcome,
    pub timestamp: String,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendFailure {
    pub message: String,
    pub retryable: bool,
}

impl BackendFailure {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendFailure {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        BackendFailure {
            message: message.into(),
            retryable: false,
        }
    }
}

impl From<Error> for BackendFailure {
    fn from(e: Error) -> Self {
        BackendFailure::fatal(e.to_string())
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendFailure>;

/// A top-k readout; `converted` marks distributions derived from log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub distribution: TokenDistribution,
    pub converted: bool,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether answers depend on the query subject and not only on the prompt.
    fn subject_dependent(&self) -> bool {
        false
    }

    fn next_token(&self, request: &QueryRequest<'_>) -> BackendResult<TopK>;

    /// Probabilities of the forced completions "yes" and "no". Both requests
    /// succeed or the pair fails.
    fn forced_pair(&self, request: &QueryRequest<'_>) -> BackendResult<YesNoMass>;
}

/// Free-text generation, used to create paraphrase sets.
pub trait TextGenerator: Send + Sync {
    fn id(&self) -> &str;

    fn generate(
        &self,
        system: &str,
        user: &str,
        temperature: f64,
        seed: u64,
    ) -> BackendResult<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, retry: u32) -> Duration {
        if self.base_delay_ms == 0 {
            return Duration::ZERO;
        }
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(16))
            .min(self.max_delay_ms);
        let jitter = rand::rng().random_range(0..=self.base_delay_ms);
        Duration::from_millis(exp + jitter)
    }

    fn run<T>(&self, mut call: impl FnMut() -> BackendResult<T>) -> (BackendResult<T>, u32) {
        let attempts = self.attempts.max(1);
        let mut retries = 0;
        loop {
            match call() {
                Ok(v) => return (Ok(v), retries),
                Err(f) if f.retryable && retries + 1 < attempts => {
                    log::warn!("backend call failed ({}), retrying", f.message);
                    std::thread::sleep(self.delay(retries));
                    retries += 1;
                }
                Err(f) => return (Err(f), retries),
            }
        }
    }
}

/// Cached, retrying access to one backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<RecordCache>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: RecordCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn cache(&self) -> Option<&RecordCache> {
        self.cache.as_ref()
    }

    /// Cache key: prompt hash, backend, decoding parameters, and the subject
    /// when the backend depends on it.
    pub fn query_key(&self, prompt: &RenderedPrompt, subject: Option<&QuerySubject>) -> String {
        self.key_for(prompt.canonical_hash(), prompt.decoding(), subject)
    }

    pub fn key_for(
        &self,
        canonical_hash: &str,
        decoding: &DecodingParams,
        subject: Option<&QuerySubject>,
    ) -> String {
        let mut buf = String::new();
        buf.push_str(canonical_hash);
        buf.push('\0');
        buf.push_str(self.backend.id());
        buf.push('\0');
        buf.push_str(&decoding.canonical());
        if self.backend.subject_dependent() {
            if let Some(s) = subject {
                buf.push('\0');
                buf.push_str(s.respondent_id.as_deref().unwrap_or("*"));
                buf.push('\0');
                buf.push_str(&s.target_id);
                buf.push('\0');
                buf.push_str(&format!("{:?}", s.gold));
            }
        }
        sha256_hex(buf.as_bytes())
    }

    /// Resolves a query from the cache, or from the backend and records it.
    pub fn resolve(
        &self,
        prompt: &RenderedPrompt,
        subject: Option<&QuerySubject>,
    ) -> Result<QueryRecord> {
        let key = self.query_key(prompt, subject);
        if let Some(cache) = &self.cache {
            if let Some(record) = cache.get(&key)? {
                return Ok(record);
            }
        }
        let request = QueryRequest { prompt, subject };
        let (outcome, retries) = match prompt.decoding().mode {
            QueryMode::TopK => {
                let (res, retries) = self.retry.run(|| self.backend.next_token(&request));
                let top = res.map_err(|f| self.failure(prompt, f))?;
                if top.distribution.k() != prompt.decoding().top_k {
                    return Err(Error::Backend {
                        hash: prompt.canonical_hash().to_string(),
                        message: format!(
                            "backend answered with k = {} but k = {} was requested",
                            top.distribution.k(),
                            prompt.decoding().top_k
                        ),
                    });
                }
                (
                    QueryOutcome::Distribution {
                        distribution: top.distribution,
                        converted_from_logprobs: top.converted,
                    },
                    retries,
                )
            }
            QueryMode::ForcedPair => {
                let (res, retries) = self.retry.run(|| self.backend.forced_pair(&request));
                let mass = res.map_err(|f| self.failure(prompt, f))?;
                (QueryOutcome::ForcedPair { mass }, retries)
            }
        };
        let record = QueryRecord {
            key,
            canonical_hash: prompt.canonical_hash().to_string(),
            backend_id: self.backend.id().to_string(),
            decoding: *prompt.decoding(),
            subject: if self.backend.subject_dependent() {
                subject.cloned()
            } else {
                None
            },
            outcome,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            retries,
        };
        if let Some(cache) = &self.cache {
            cache.put(&record)?;
        }
        Ok(record)
    }

    /// Top-k distribution for the token after the prompt.
    pub fn query_next_token(&self, prompt: &RenderedPrompt) -> Result<TokenDistribution> {
        let record = self.resolve(prompt, None)?;
        match record.outcome {
            QueryOutcome::Distribution { distribution, .. } => Ok(distribution),
            QueryOutcome::ForcedPair { .. } => Err(Error::Backend {
                hash: prompt.canonical_hash().to_string(),
                message: "prompt was rendered for forced-pair decoding".into(),
            }),
        }
    }

    pub fn forced_pair_query(&self, prompt: &RenderedPrompt) -> Result<YesNoMass> {
        let record = self.resolve(prompt, None)?;
        match record.outcome {
            QueryOutcome::ForcedPair { mass } => Ok(mass),
            QueryOutcome::Distribution { .. } => Err(Error::Backend {
                hash: prompt.canonical_hash().to_string(),
                message: "prompt was rendered for top-k decoding".into(),
            }),
        }
    }

    fn failure(&self, prompt: &RenderedPrompt, f: BackendFailure) -> Error {
        Error::Backend {
            hash: prompt.canonical_hash().to_string(),
            message: f.message,
        }
    }
}

/// Generation with caching and retries, keyed on the full request.
pub struct GenerationGateway {
    generator: Arc<dyn TextGenerator>,
    cache: Option<RecordCache>,
    retry: RetryPolicy,
}

impl GenerationGateway {
    pub fn new(generator: Arc<dyn TextGenerator>) -> Self {
        GenerationGateway {
            generator,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_cache(mut self, cache: RecordCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn generate(&self, system: &str, user: &str, temperature: f64, seed: u64) -> Result<String> {
        let key = sha256_hex(
            format!(
                "generation\0{}\0{system}\0{user}\0{temperature:?}\0{seed}",
                self.generator.id()
            )
            .as_bytes(),
        );
        if let Some(cache) = &self.cache {
            if let Some(r) = cache.get_generation(&key)? {
                return Ok(r.text);
            }
        }
        let (res, _) = self
            .retry
            .run(|| self.generator.generate(system, user, temperature, seed));
        let text = res.map_err(|f| Error::Backend {
            hash: key.clone(),
            message: f.message,
        })?;
        if let Some(cache) = &self.cache {
            cache.put_generation(&GenerationRecord {
                key,
                backend_id: self.generator.id().to_string(),
                system: system.to_string(),
                user: user.to_string(),
                temperature,
                seed,
                text: text.clone(),
            })?;
        }
        Ok(text)
    }
}
