//! Plumbing shared by every model adapter: the error type, audio locators,
//! retry with exponential backoff, a token-bucket rate limiter and a small
//! JSON-over-HTTP client.

use std::fmt;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Connection failures, timeouts and 5xx/429 replies. Retried.
    #[error("transport error: {0}")]
    Transport(String),
    /// The backend rejected the input (unreadable audio, 4xx). Not retried.
    #[error("input error: {0}")]
    Input(String),
    /// The backend answered with something that violates the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// File path or opaque identifier understood by the backends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AudioRef(pub String);

impl AudioRef {
    pub fn new(locator: impl Into<String>) -> Self {
        AudioRef(locator.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AudioRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AudioRef {
    fn from(s: &str) -> Self {
        AudioRef(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay: Duration,
    pub multiplier: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_delay: Duration::from_millis(500),
            multiplier: 2.0,
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Same retry count with no sleeping, for tests.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            initial_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = self.multiplier.powi(retry as i32);
        self.initial_delay.mul_f64(factor).min(self.max_delay)
    }

    /// Runs `op`, retrying transport errors up to `max_retries` times.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut retry = 0;
        loop {
            match op() {
                Err(err) if err.is_retryable() && retry < self.max_retries => {
                    let delay = self.delay_for(retry);
                    log::debug!("retry {}/{} in {delay:?}: {err}", retry + 1, self.max_retries);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

/// Adds retries to any adapter. The wrapped adapter stays reachable through
/// `inner`.
#[derive(Debug)]
pub struct Retrying<B> {
    pub inner: B,
    pub policy: RetryPolicy,
}

impl<B> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Retrying { inner, policy }
    }
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

/// Blocking token bucket. `acquire` waits until a token is available.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<Bucket>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let requests = requests.max(1) as f64;
        RateLimiter {
            capacity: requests,
            per_second: requests / 60.0,
            state: Mutex::new(Bucket {
                tokens: requests,
                last: Instant::now(),
            }),
        }
    }

    /// How long the caller would have to wait right now; consumes a token
    /// when it returns zero.
    fn try_take(&self) -> Duration {
        let mut bucket = self.state.lock().expect("rate limiter poisoned");
        let now = Instant::now();
        let elapsed = now.duration_since(bucket.last).as_secs_f64();
        bucket.tokens = (bucket.tokens + elapsed * self.per_second).min(self.capacity);
        bucket.last = now;
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            Duration::ZERO
        } else {
            Duration::from_secs_f64((1.0 - bucket.tokens) / self.per_second)
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = self.try_take();
            if wait.is_zero() {
                return;
            }
            thread::sleep(wait);
        }
    }
}

/// Wraps an adapter so every outbound call first takes a limiter token.
#[derive(Debug)]
pub struct RateLimited<B> {
    pub inner: B,
    pub limiter: RateLimiter,
}

impl<B> RateLimited<B> {
    pub fn new(inner: B, requests_per_minute: u32) -> Self {
        RateLimited {
            inner,
            limiter: RateLimiter::per_minute(requests_per_minute),
        }
    }
}

/// How audio travels to an HTTP backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioTransport {
    /// The locator is a path on the server's filesystem.
    #[default]
    Path,
    /// The file is read locally and sent inline as base64.
    Base64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub(crate) struct AudioField {
    pub audio: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding: Option<&'static str>,
}

impl AudioTransport {
    pub(crate) fn encode(self, audio: &AudioRef) -> Result<AudioField, BackendError> {
        match self {
            AudioTransport::Path => Ok(AudioField {
                audio: audio.0.clone(),
                encoding: None,
            }),
            AudioTransport::Base64 => {
                let bytes = std::fs::read(Path::new(&audio.0))
                    .map_err(|e| BackendError::Input(format!("cannot read {audio}: {e}")))?;
                Ok(AudioField {
                    audio: base64::engine::general_purpose::STANDARD.encode(bytes),
                    encoding: Some("base64"),
                })
            }
        }
    }
}

/// Minimal JSON POST client. The bearer token never appears in `Debug`
/// output or error messages.
#[derive(Clone)]
pub struct HttpJsonClient {
    base_url: String,
    agent: ureq::Agent,
    bearer: Option<String>,
}

impl fmt::Debug for HttpJsonClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpJsonClient")
            .field("base_url", &self.base_url)
            .field("bearer", &self.bearer.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpJsonClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpJsonClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::Agent::new_with_config(config),
            bearer: None,
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> Self {
        self.bearer = token.filter(|t| !t.is_empty());
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut request = self.agent.post(&url);
        if let Some(token) = &self.bearer {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| BackendError::Transport(format!("POST {url}: {e}")))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("POST {url}: HTTP {status}")));
        }
        if status >= 400 {
            let mut detail = response.body_mut().read_to_string().unwrap_or_default();
            if let Some(token) = &self.bearer {
                detail = detail.replace(token.as_str(), "<redacted>");
            }
            return Err(BackendError::Input(format!(
                "POST {url}: HTTP {status}: {}",
                detail.chars().take(200).collect::<String>()
            )));
        }
        response
            .body_mut()
            .read_json::<R>()
            .map_err(|e| BackendError::Protocol(format!("POST {url}: {e}")))
    }
}

/// Appends one JSON line per backend call; used by the scripted adapters so
/// tests in other processes can count calls.
#[derive(Debug)]
pub(crate) struct CallLog<T> {
    calls: Mutex<Vec<T>>,
    file: Option<Mutex<std::fs::File>>,
}

impl<T> Default for CallLog<T> {
    fn default() -> Self {
        CallLog {
            calls: Mutex::new(Vec::new()),
            file: None,
        }
    }
}

impl<T: Clone + Serialize> CallLog<T> {
    pub(crate) fn with_file(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(CallLog {
            calls: Mutex::new(Vec::new()),
            file: Some(Mutex::new(file)),
        })
    }

    pub(crate) fn record(&self, call: T) {
        if let Some(file) = &self.file {
            use std::io::Write;
            if let Ok(line) = serde_json::to_string(&call) {
                let mut file = file.lock().expect("call log poisoned");
                let _ = writeln!(file, "{line}");
            }
        }
        self.calls.lock().expect("call log poisoned").push(call);
    }

    pub(crate) fn snapshot(&self) -> Vec<T> {
        self.calls.lock().expect("call log poisoned").clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub(crate) enum ScriptedFailure {
    Transport,
    Input,
}

impl ScriptedFailure {
    pub(crate) fn to_error(self, what: &str) -> BackendError {
        match self {
            ScriptedFailure::Transport => BackendError::Transport(format!("scripted failure: {what}")),
            ScriptedFailure::Input => BackendError::Input(format!("scripted failure: {what}")),
        }
    }
}

pub(crate) fn read_script<T: DeserializeOwned>(path: &Path) -> Result<T, BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::Input(format!("cannot read script {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| BackendError::Input(format!("invalid script {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_transport_errors_three_times() {
        let attempts = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(3).run(|| {
            attempts.set(attempts.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(result.is_err());
        assert_eq!(attempts.get(), 4);
    }

    #[test]
    fn input_errors_are_not_retried() {
        let attempts = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(3).run(|| {
            attempts.set(attempts.get() + 1);
            Err(BackendError::Input("bad".into()))
        });
        assert_eq!(result, Err(BackendError::Input("bad".into())));
        assert_eq!(attempts.get(), 1);
    }

    #[test]
    fn recovers_after_transient_failure() {
        let attempts = Cell::new(0);
        let result = RetryPolicy::immediate(3).run(|| {
            attempts.set(attempts.get() + 1);
            if attempts.get() < 3 {
                Err(BackendError::Transport("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(result, Ok(7));
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let policy = RetryPolicy::default();
        assert_eq!(policy.delay_for(0), Duration::from_millis(500));
        assert_eq!(policy.delay_for(1), Duration::from_millis(1000));
        assert_eq!(policy.delay_for(2), Duration::from_millis(2000));
        assert_eq!(policy.delay_for(20), Duration::from_secs(30));
    }

    #[test]
    fn rate_limiter_starts_with_full_bucket() {
        let limiter = RateLimiter::per_minute(5);
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(100));
        assert!(!limiter.try_take().is_zero());
    }

    #[test]
    fn debug_output_hides_token() {
        let client = HttpJsonClient::new("http://localhost:1", Duration::from_secs(1))
            .with_bearer(Some("sk-secret".into()));
        assert!(!format!("{client:?}").contains("sk-secret"));
    }

    #[test]
    fn base64_transport_reports_unreadable_audio() {
        let err = AudioTransport::Base64
            .encode(&AudioRef::new("/definitely/not/here.wav"))
            .unwrap_err();
        assert!(matches!(err, BackendError::Input(_)));
    }
}
