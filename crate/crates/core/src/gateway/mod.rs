//! Black-box completion interface.
//!
//! Every LLM call in the crate goes through a [`Gateway`]: requests are keyed
//! by content, looked up in a shared (optionally persistent) cache, retried
//! with exponential backoff on transient failures, and counted in a
//! [`CallLedger`]. Concurrent lookups of the same key are coalesced so a key
//! is never sent upstream twice.

mod cache;
mod http;
mod ledger;
pub mod mock;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::{OpenAiBackend, API_KEY_ENV, DEFAULT_BASE_URL};
pub use ledger::{CallLedger, Phase, PhaseCounts};
pub use mock::MockOracle;

pub const DEFAULT_MODEL: &str = "gpt-4.1-mini";
pub const DEFAULT_PARALLELISM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    4000
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Stable content hash over every request field.
pub fn cache_key(req: &CompletionRequest) -> String {
    let mut hasher = Sha256::new();
    for field in [req.model.as_bytes(), req.prompt.as_bytes()] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    hasher.update(req.temperature.to_bits().to_le_bytes());
    hasher.update(req.max_output_tokens.to_le_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by upstream")]
    RateLimited,
    #[error("upstream returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed upstream payload: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("mock oracle has no response for prompt starting {0:?}")]
    MockMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
}

impl GatewayError {
    /// Errors worth retrying with backoff.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::RateLimited | GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Something that turns a prompt into a completion.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;

    /// Mock backends make the gateway use a frozen clock.
    fn is_mock(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retry_limit: 5,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(retry_limit: u32) -> Self {
        RetryPolicy {
            retry_limit,
            base_delay: Duration::ZERO,
            ..Default::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        let jitter = if self.jitter > 0.0 {
            rand::rng().random_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64((nominal * (1.0 + jitter)).max(0.0))
    }
}

/// Wall-clock source. Frozen clocks make reports byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Frozen,
}

impl Clock {
    pub fn now_ms(self) -> u64 {
        match self {
            Clock::System => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            Clock::Frozen => 0,
        }
    }

    fn elapsed_ms(self, since: Instant) -> u64 {
        match self {
            Clock::System => since.elapsed().as_millis() as u64,
            Clock::Frozen => 0,
        }
    }
}

type Slot = Arc<OnceLock<Result<String, GatewayError>>>;

pub struct Gateway {
    backend: Arc<dyn Backend>,
    model: String,
    retry: RetryPolicy,
    parallelism: usize,
    clock: Clock,
    cache: Option<ResponseCache>,
    slots: Mutex<HashMap<String, Slot>>,
    ledger: Mutex<CallLedger>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.model)
            .field("parallelism", &self.parallelism)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        let clock = if backend.is_mock() { Clock::Frozen } else { Clock::System };
        Gateway {
            backend,
            model: DEFAULT_MODEL.to_string(),
            retry: RetryPolicy::default(),
            parallelism: DEFAULT_PARALLELISM,
            clock,
            cache: None,
            slots: Mutex::new(HashMap::new()),
            ledger: Mutex::new(CallLedger::default()),
        }
    }

    pub fn mock(oracle: MockOracle) -> Self {
        Self::new(Arc::new(oracle))
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// Attaches a persistent cache file; its records are served as hits.
    pub fn with_cache_file(mut self, path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let cache = ResponseCache::open(path)?;
        {
            let mut slots = self.slots.lock().unwrap();
            for (key, response) in cache.records() {
                let slot = OnceLock::new();
                let _ = slot.set(Ok(response.clone()));
                slots.insert(key.clone(), Arc::new(slot));
            }
        }
        self.cache = Some(cache);
        Ok(self)
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn ledger(&self) -> CallLedger {
        self.ledger.lock().unwrap().clone()
    }

    /// A request for the configured model.
    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest::new(self.model.clone(), prompt)
    }

    pub fn complete(&self, phase: Phase, req: &CompletionRequest) -> Result<String, GatewayError> {
        let start = Instant::now();
        let out = self.lookup(phase, req);
        self.ledger.lock().unwrap().wall_time_ms += self.clock.elapsed_ms(start);
        out
    }

    /// Completes `reqs` with at most `parallelism` requests in flight.
    /// Results come back in input order; duplicate requests are sent once.
    /// The first failure stops new work, lets in-flight calls drain, and is
    /// returned instead of any partial results.
    pub fn batch_complete(
        &self,
        phase: Phase,
        reqs: &[CompletionRequest],
        parallelism: usize,
    ) -> Result<Vec<String>, GatewayError> {
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let start = Instant::now();
        for req in reqs {
            req.validate()?;
        }
        let keys: Vec<String> = reqs.iter().map(cache_key).collect();
        let mut first_of: HashMap<&str, usize> = HashMap::new();
        let mut unique: Vec<usize> = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            if !first_of.contains_key(key.as_str()) {
                first_of.insert(key, unique.len());
                unique.push(i);
            }
        }
        let duplicates = reqs.len() - unique.len();
        if duplicates > 0 {
            self.ledger.lock().unwrap().record_hits(phase, duplicates as u64);
        }

        let results: Vec<Mutex<Option<Result<String, GatewayError>>>> =
            unique.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let workers = parallelism.max(1).min(unique.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&req_index) = unique.get(slot) else {
                        break;
                    };
                    let out = self.lookup(phase, &reqs[req_index]);
                    if out.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    *results[slot].lock().unwrap() = Some(out);
                });
            }
        });
        self.ledger.lock().unwrap().wall_time_ms += self.clock.elapsed_ms(start);

        let results: Vec<Option<Result<String, GatewayError>>> =
            results.into_iter().map(|cell| cell.into_inner().unwrap()).collect();
        if let Some(Some(Err(e))) = results.iter().find(|r| matches!(r, Some(Err(_)))) {
            return Err(e.clone());
        }
        let done: Vec<String> = results
            .into_iter()
            .map(|r| r.and_then(Result::ok).expect("every slot ran when nothing failed"))
            .collect();
        Ok(keys.iter().map(|k| done[first_of[k.as_str()]].clone()).collect())
    }

    fn lookup(&self, phase: Phase, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let key = cache_key(req);
        let slot = self
            .slots
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let mut missed = false;
        let out = slot
            .get_or_init(|| {
                missed = true;
                let response = self.call_with_retry(phase, req);
                if let (Ok(text), Some(cache)) = (&response, &self.cache) {
                    cache.append(&key, &req.model, text, self.clock.now_ms())?;
                }
                response
            })
            .clone();
        if out.is_err() {
            let mut slots = self.slots.lock().unwrap();
            if slots.get(&key).is_some_and(|s| Arc::ptr_eq(s, &slot)) {
                slots.remove(&key);
            }
        }
        self.ledger.lock().unwrap().record_lookup(phase, !missed);
        out
    }

    fn call_with_retry(&self, phase: Phase, req: &CompletionRequest) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            self.ledger.lock().unwrap().record_call(phase, attempt > 0);
            match self.backend.complete(req) {
                Err(e) if e.is_transient() && attempt < self.retry.retry_limit => {
                    tracing::warn!(attempt, error = %e, "transient gateway failure, backing off");
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::sync::atomic::AtomicU32;

    fn scripted(pairs: &[(&str, &str)]) -> Gateway {
        let map: BTreeMap<String, String> =
            pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Gateway::mock(MockOracle::scripted(map))
    }

    #[test]
    fn scripted_and_cached() {
        let gw = scripted(&[("hi", "yo")]);
        let req = gw.request("hi");
        assert_eq!(gw.complete(Phase::Evaluation, &req).unwrap(), "yo");
        assert_eq!(gw.complete(Phase::Evaluation, &req).unwrap(), "yo");
        let ledger = gw.ledger();
        assert_eq!(ledger.total_calls, 1);
        assert_eq!(ledger.cache_hits, 1);
        assert_eq!(ledger.lookups, 2);
        assert_eq!(ledger.wall_time_ms, 0);
    }

    #[test]
    fn mock_miss() {
        let gw = scripted(&[("hi", "yo")]);
        assert!(matches!(
            gw.complete(Phase::Evaluation, &gw.request("unknown")),
            Err(GatewayError::MockMiss(_))
        ));
    }

    #[test]
    fn cache_keys() {
        let a = CompletionRequest::new("m", "prompt");
        assert_eq!(cache_key(&a), cache_key(&a.clone()));
        let mut warm = a.clone();
        warm.temperature = 0.1;
        assert_ne!(cache_key(&a), cache_key(&warm));
        assert_ne!(cache_key(&a), cache_key(&CompletionRequest::new("m", "prompT")));
        let mut short = a.clone();
        short.max_output_tokens = 10;
        assert_ne!(cache_key(&a), cache_key(&short));
        // field boundaries are not ambiguous
        assert_ne!(
            cache_key(&CompletionRequest::new("ab", "c")),
            cache_key(&CompletionRequest::new("a", "bc"))
        );
    }

    #[test]
    fn invalid_requests() {
        let gw = scripted(&[]);
        assert!(matches!(
            gw.complete(Phase::Evaluation, &gw.request("")),
            Err(GatewayError::InvalidRequest(_))
        ));
        let mut req = gw.request("x");
        req.temperature = -1.0;
        assert!(matches!(gw.complete(Phase::Evaluation, &req), Err(GatewayError::InvalidRequest(_))));
    }

    struct Flaky {
        failures: AtomicU32,
        error: GatewayError,
    }

    impl Backend for Flaky {
        fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(self.error.clone());
            }
            Ok(req.prompt.to_uppercase())
        }
    }

    #[test]
    fn transient_errors_are_retried() {
        let backend = Arc::new(Flaky {
            failures: AtomicU32::new(3),
            error: GatewayError::RateLimited,
        });
        let gw = Gateway::new(backend).with_retry(RetryPolicy::no_delay(5));
        assert_eq!(gw.complete(Phase::Evaluation, &gw.request("a")).unwrap(), "A");
        let ledger = gw.ledger();
        assert_eq!(ledger.total_calls, 1);
        assert_eq!(ledger.retries, 3);
    }

    #[test]
    fn retries_exhaust_then_surface() {
        let backend = Arc::new(Flaky {
            failures: AtomicU32::new(10),
            error: GatewayError::Timeout,
        });
        let gw = Gateway::new(backend).with_retry(RetryPolicy::no_delay(2));
        assert_eq!(gw.complete(Phase::Evaluation, &gw.request("a")), Err(GatewayError::Timeout));
        assert_eq!(gw.ledger().retries, 2);
        // the failure is not cached
        let backend_ok = gw.complete(Phase::Evaluation, &gw.request("a"));
        assert_eq!(backend_ok, Err(GatewayError::Timeout));
    }

    #[test]
    fn malformed_is_not_retried() {
        let backend = Arc::new(Flaky {
            failures: AtomicU32::new(1),
            error: GatewayError::Malformed("bad".into()),
        });
        let gw = Gateway::new(backend).with_retry(RetryPolicy::no_delay(5));
        assert!(matches!(
            gw.complete(Phase::Evaluation, &gw.request("a")),
            Err(GatewayError::Malformed(_))
        ));
        assert_eq!(gw.ledger().retries, 0);
        assert_eq!(gw.complete(Phase::Evaluation, &gw.request("a")).unwrap(), "A");
    }

    #[test]
    fn backoff_grows() {
        let policy = RetryPolicy {
            jitter: 0.0,
            ..Default::default()
        };
        assert_eq!(policy.delay(0), Duration::from_millis(500));
        assert_eq!(policy.delay(2), Duration::from_millis(2000));
        let jittered = RetryPolicy::default().delay(1);
        assert!(jittered >= Duration::from_millis(800) && jittered <= Duration::from_millis(1200));
    }
}
