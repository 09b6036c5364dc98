//! Uniform chat-with-image interface over several providers.
//!
//! - `http` - request builders and response readers for each HTTP schema
//! - `scripted` - deterministic backend keyed by (frame, stage)
//!
//! A [`Provider`] wraps one [`Transport`] and adds the shared behavior:
//! rate limiting, retry with exponential backoff, and latency measurement.

mod http;
mod scripted;

pub use http::{build_request_body, parse_response, request_url, HttpTransport};
pub use scripted::{FailKind, ScriptEntry, ScriptedBackend, WILDCARD};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("provider rejected the request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed provider payload: missing or invalid `{field}`")]
    Malformed { field: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ClientError> },
    #[error("no script entry for frame {frame_id} stage {stage}")]
    MissingScript { frame_id: String, stage: u8 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    Config(String),
}

impl ClientError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    OpenaiCompatible,
    Anthropic,
    Gemini,
    Scripted,
}

impl ProviderKind {
    pub fn default_endpoint(&self) -> &'static str {
        match self {
            ProviderKind::OpenaiCompatible => "https://api.openai.com/v1/chat/completions",
            ProviderKind::Anthropic => "https://api.anthropic.com/v1/messages",
            ProviderKind::Gemini => "https://generativelanguage.googleapis.com/v1beta/models",
            ProviderKind::Scripted => "",
        }
    }
}

fn default_max_retries() -> u32 {
    3
}

fn default_max_output_tokens() -> u32 {
    1024
}

fn default_timeout() -> f64 {
    120.0
}

/// Provider settings as they appear in a run config. API keys are never
/// stored here, only the name of the environment variable holding one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Dollars per million input tokens.
    #[serde(default)]
    pub price_in: f64,
    /// Dollars per million output tokens.
    #[serde(default)]
    pub price_out: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Seconds between the starts of consecutive requests.
    #[serde(default)]
    pub min_request_interval: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Left to the provider default when absent.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    /// JSONL script for the scripted backend.
    #[serde(default)]
    pub script_path: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn new(kind: ProviderKind, model_name: impl Into<String>) -> Self {
        Self {
            kind,
            endpoint: None,
            model_name: model_name.into(),
            api_key_env: None,
            price_in: 0.0,
            price_out: 0.0,
            max_retries: default_max_retries(),
            min_request_interval: 0.0,
            max_output_tokens: default_max_output_tokens(),
            temperature: None,
            request_timeout: default_timeout(),
            script_path: None,
        }
    }

    pub fn endpoint(&self) -> &str {
        self.endpoint
            .as_deref()
            .unwrap_or_else(|| self.kind.default_endpoint())
    }

    pub fn pricing(&self) -> Pricing {
        Pricing {
            price_in: self.price_in,
            price_out: self.price_out,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.price_in >= 0.0 && self.price_out >= 0.0) {
            return Err(ClientError::Config("prices must be non-negative".into()));
        }
        if !(self.min_request_interval >= 0.0 && self.min_request_interval.is_finite()) {
            return Err(ClientError::Config("min_request_interval must be non-negative".into()));
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err(ClientError::Config(format!("temperature {t} outside [0, 2]")));
            }
        }
        if self.model_name.is_empty() {
            return Err(ClientError::Config("model_name is empty".into()));
        }
        match self.kind {
            ProviderKind::Scripted => {
                if self.script_path.is_none() {
                    return Err(ClientError::Config("scripted provider needs script_path".into()));
                }
            }
            _ => {
                if self.api_key_env.as_deref().unwrap_or("").is_empty() {
                    return Err(ClientError::Config("api_key_env is required for HTTP providers".into()));
                }
            }
        }
        Ok(())
    }
}

/// Dollars per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pricing {
    pub price_in: f64,
    pub price_out: f64,
}

/// Cost of one call in cents.
pub fn estimate_cost(input_tokens: u64, output_tokens: u64, pricing: &Pricing) -> f64 {
    100.0 * (input_tokens as f64 * pricing.price_in + output_tokens as f64 * pricing.price_out) / 1e6
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImageAttachment {
    /// Infers the media type from the file extension.
    pub fn from_path_bytes(path: &std::path::Path, bytes: Vec<u8>) -> Self {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let media_type = match ext.as_deref() {
            Some("png") => "image/png",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "image/jpeg",
        };
        Self {
            bytes,
            media_type: media_type.to_string(),
        }
    }
}

/// Identifies a request for the scripted backend; HTTP transports ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey {
    pub frame_id: String,
    pub stage: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: Option<String>,
    pub user_text: String,
    pub image: Option<Arc<ImageAttachment>>,
    pub max_output_tokens: u32,
    pub temperature: Option<f64>,
    pub key: Option<RequestKey>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.user_text.is_empty() {
            return Err(ClientError::InvalidRequest("user_text is empty".into()));
        }
        if self.image.as_ref().is_some_and(|i| i.bytes.is_empty()) {
            return Err(ClientError::InvalidRequest("image bytes are empty".into()));
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err(ClientError::InvalidRequest(format!("temperature {t} outside [0, 2]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Seconds.
    pub latency: f64,
    pub provider_metadata: BTreeMap<String, String>,
}

/// One transport-level reply, before latency is attached.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub metadata: BTreeMap<String, String>,
    /// Overrides the measured latency (the scripted backend reports its own).
    pub reported_latency: Option<f64>,
}

/// A single attempt against a backend.
pub trait Transport: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<Reply, ClientError>;
}

/// Time source for rate limiting, backoff and latency.
pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// A clock that only moves when slept on. Records every sleep.
#[derive(Default)]
pub struct FakeClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        self.state.lock().unwrap().0 += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, duration: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += duration;
        s.1.push(duration);
    }
}

/// Exponential backoff with symmetric multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), given a uniform draw in [-1, 1].
    pub fn delay(&self, retry: u32, unit_draw: f64) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64((nominal * (1.0 + self.jitter * unit_draw)).max(0.0))
    }
}

/// A provider handle, shareable across worker threads.
pub struct Provider {
    config: ProviderConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    last_start: Mutex<Option<Duration>>,
    rng: Mutex<StdRng>,
}

impl Provider {
    pub fn new(config: ProviderConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            config,
            transport,
            clock: Arc::new(SystemClock::default()),
            retry: RetryPolicy::default(),
            last_start: Mutex::new(None),
            rng: Mutex::new(StdRng::from_entropy()),
        }
    }

    /// Builds the transport the config names. The scripted backend is loaded
    /// from `script_path`.
    pub fn from_config(config: ProviderConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let transport: Arc<dyn Transport> = match config.kind {
            ProviderKind::Scripted => {
                let path = config.script_path.as_ref().expect("validated");
                Arc::new(ScriptedBackend::from_file(path)?)
            }
            _ => Arc::new(HttpTransport::new(config.clone())?),
        };
        Ok(Self::new(config, transport))
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.lock().unwrap() = StdRng::seed_from_u64(seed);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn pricing(&self) -> Pricing {
        self.config.pricing()
    }

    /// Blocks until the rate limiter admits another request.
    fn admit(&self) {
        let interval = Duration::from_secs_f64(self.config.min_request_interval);
        let mut last = self.last_start.lock().unwrap();
        if let Some(prev) = *last {
            let ready = prev + interval;
            let now = self.clock.now();
            if ready > now {
                self.clock.sleep(ready - now);
            }
        }
        *last = Some(self.clock.now());
    }

    /// Sends one request, retrying transient failures up to `max_retries`
    /// times. Authentication failures are never retried.
    pub fn send(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let mut retries = 0;
        loop {
            self.admit();
            let started = self.clock.now();
            match self.transport.call(request) {
                Ok(reply) => {
                    let measured = (self.clock.now() - started).as_secs_f64();
                    return Ok(ChatResponse {
                        text: reply.text,
                        input_tokens: reply.input_tokens,
                        output_tokens: reply.output_tokens,
                        latency: reply.reported_latency.unwrap_or(measured),
                        provider_metadata: reply.metadata,
                    });
                }
                Err(err) if err.is_transient() => {
                    if retries >= self.config.max_retries {
                        return Err(ClientError::RetriesExhausted {
                            attempts: retries + 1,
                            last: Box::new(err),
                        });
                    }
                    let draw = self.rng.lock().unwrap().gen_range(-1.0..=1.0);
                    let delay = self.retry.delay(retries, draw);
                    tracing::warn!(attempt = retries + 1, ?delay, "transient provider failure: {err}");
                    self.clock.sleep(delay);
                    retries += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}
