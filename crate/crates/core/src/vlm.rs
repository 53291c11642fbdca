//! Chat-completion client for a hosted vision-language model, with bounded
//! retries and a scripted mock backend for offline, reproducible runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_URL: &str = "DHUMOR_VLM_URL";
pub const ENV_TOKEN: &str = "DHUMOR_VLM_TOKEN";

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned status {0}")]
    EndpointError(u16),
    #[error("gave up after {attempts} attempts, last failure: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
    #[error("mock script is empty")]
    EmptyScript,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unusable endpoint response: {0}")]
    Protocol(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub image: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_id: String,
}

impl VlmRequest {
    pub fn new(request_id: impl Into<String>, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        VlmRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            image: None,
            temperature: 0.0,
            max_tokens: 1024,
            request_id: request_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.max_tokens < 1 {
            return Err(VlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(VlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VlmResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// A single failed call, before retry handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallFailure {
    Timeout,
    Status(u16),
    Network(String),
    Malformed(String),
}

impl CallFailure {
    /// Timeouts, rate limiting, server errors and connection problems are
    /// worth retrying; client errors and malformed bodies are not.
    pub fn is_transient(&self) -> bool {
        match self {
            CallFailure::Timeout | CallFailure::Network(_) => true,
            CallFailure::Status(s) => *s == 408 || *s == 429 || *s >= 500,
            CallFailure::Malformed(_) => false,
        }
    }

    fn into_error(self) -> VlmError {
        match self {
            CallFailure::Timeout => VlmError::Timeout,
            CallFailure::Status(s) => VlmError::EndpointError(s),
            CallFailure::Network(m) | CallFailure::Malformed(m) => VlmError::Protocol(m),
        }
    }

    fn describe(&self) -> String {
        match self {
            CallFailure::Timeout => "timeout".into(),
            CallFailure::Status(s) => format!("status {s}"),
            CallFailure::Network(m) => format!("network: {m}"),
            CallFailure::Malformed(m) => format!("malformed response: {m}"),
        }
    }
}

/// One scripted mock reply. In a JSON script a bare string is a canned
/// completion; objects select the other behaviours, e.g.
/// `{"kind": "fail", "status": 503}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Directive(MockDirective),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockDirective {
    /// Reply with the request's user prompt.
    Echo,
    Fail { status: u16 },
    Timeout,
}

impl MockReply {
    pub fn text(s: impl Into<String>) -> Self {
        MockReply::Text(s.into())
    }
    pub const ECHO: MockReply = MockReply::Directive(MockDirective::Echo);
    pub const TIMEOUT: MockReply = MockReply::Directive(MockDirective::Timeout);
    pub fn fail(status: u16) -> Self {
        MockReply::Directive(MockDirective::Fail { status })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Http {
        url: String,
        token: Option<String>,
        model: String,
        timeout_ms: u64,
    },
    Mock(Vec<MockReply>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub backend: BackendConfig,
    /// Maximum attempts per request, including the first.
    pub retry_cap: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_in_flight: usize,
}

pub const DEFAULT_MODEL: &str = "Qwen/Qwen2.5-VL-7B-Instruct";

impl EndpointConfig {
    pub fn http(url: impl Into<String>) -> Self {
        EndpointConfig {
            backend: BackendConfig::Http {
                url: url.into(),
                token: None,
                model: DEFAULT_MODEL.into(),
                timeout_ms: 120_000,
            },
            retry_cap: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            max_in_flight: 4,
        }
    }

    /// Delay before attempt `n + 1`, for `n` in `1..retry_cap`.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (1..self.retry_cap)
            .map(|n| {
                let factor = 1u64.checked_shl(n - 1).unwrap_or(u64::MAX);
                Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.retry_cap < 1 {
            return Err(VlmError::Config("retry_cap must be >= 1".into()));
        }
        if self.max_in_flight < 1 {
            return Err(VlmError::Config("max_in_flight must be >= 1".into()));
        }
        if let BackendConfig::Mock(script) = &self.backend {
            if script.is_empty() {
                return Err(VlmError::EmptyScript);
            }
        }
        Ok(())
    }
}

/// A mock endpoint that replays `script` in order, repeating the last entry
/// once exhausted. Backoff is zero so scripted failures do not sleep.
pub fn mock_from_script(script: Vec<MockReply>) -> Result<EndpointConfig, VlmError> {
    if script.is_empty() {
        return Err(VlmError::EmptyScript);
    }
    Ok(EndpointConfig {
        backend: BackendConfig::Mock(script),
        retry_cap: 3,
        backoff_base_ms: 0,
        backoff_max_ms: 0,
        max_in_flight: 1,
    })
}

/// Reads a JSON array of [`MockReply`] entries.
pub fn load_mock_script(path: impl AsRef<Path>) -> Result<Vec<MockReply>, VlmError> {
    let text = fs::read_to_string(path.as_ref())
        .map_err(|e| VlmError::Config(format!("{}: {e}", path.as_ref().display())))?;
    serde_json::from_str(&text).map_err(|e| VlmError::Config(format!("mock script: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    vlm: VlmSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VlmSection {
    url: Option<String>,
    token: Option<String>,
    model: Option<String>,
    timeout_ms: Option<u64>,
    retry_cap: Option<u32>,
    max_in_flight: Option<usize>,
    backoff_base_ms: Option<u64>,
    backoff_max_ms: Option<u64>,
    mock_script: Option<PathBuf>,
}

/// Builds an endpoint config from TOML text (a `[vlm]` table) with
/// environment overrides for the URL and token. `env` is a lookup function so
/// callers can pass `std::env::var(..).ok()` or a fixed map.
pub fn endpoint_from_toml(
    text: &str,
    base_dir: &Path,
    env: impl Fn(&str) -> Option<String>,
) -> Result<EndpointConfig, VlmError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| VlmError::Config(e.to_string()))?;
    let v = file.vlm;
    let mut cfg = match (&v.mock_script, env(ENV_URL).or(v.url)) {
        (Some(script), _) => {
            let path = if script.is_absolute() { script.clone() } else { base_dir.join(script) };
            mock_from_script(load_mock_script(path)?)?
        }
        (None, Some(url)) => {
            let mut cfg = EndpointConfig::http(url);
            if let BackendConfig::Http { token, model, timeout_ms, .. } = &mut cfg.backend {
                *token = env(ENV_TOKEN).or(v.token);
                if let Some(m) = v.model {
                    *model = m;
                }
                if let Some(t) = v.timeout_ms {
                    *timeout_ms = t;
                }
            }
            cfg
        }
        (None, None) => {
            return Err(VlmError::Config(format!(
                "no endpoint: set [vlm] url, mock_script, or {ENV_URL}"
            )))
        }
    };
    if let Some(n) = v.retry_cap {
        cfg.retry_cap = n;
    }
    if let Some(n) = v.max_in_flight {
        cfg.max_in_flight = n;
    }
    if let Some(n) = v.backoff_base_ms {
        cfg.backoff_base_ms = n;
    }
    if let Some(n) = v.backoff_max_ms {
        cfg.backoff_max_ms = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_endpoint_config(path: impl AsRef<Path>) -> Result<EndpointConfig, VlmError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| VlmError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    endpoint_from_toml(&text, base, |k| std::env::var(k).ok())
}

trait Backend: Send + Sync {
    fn call(&self, req: &VlmRequest) -> Result<String, CallFailure>;
}

struct MockBackend {
    script: Vec<MockReply>,
    cursor: Mutex<usize>,
}

impl Backend for MockBackend {
    fn call(&self, req: &VlmRequest) -> Result<String, CallFailure> {
        let entry = {
            let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
            let idx = (*cursor).min(self.script.len() - 1);
            *cursor += 1;
            self.script[idx].clone()
        };
        match entry {
            MockReply::Text(t) => Ok(t),
            MockReply::Directive(MockDirective::Echo) => Ok(req.user_prompt.clone()),
            MockReply::Directive(MockDirective::Fail { status }) => Err(CallFailure::Status(status)),
            MockReply::Directive(MockDirective::Timeout) => Err(CallFailure::Timeout),
        }
    }
}

struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    model: String,
}

fn image_data_url(path: &Path) -> Result<String, CallFailure> {
    let bytes = fs::read(path).map_err(|e| CallFailure::Malformed(format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

/// OpenAI-style chat-completions body with the image inlined as a data URL.
pub fn chat_completion_body(req: &VlmRequest, model: &str) -> Result<Value, CallFailure> {
    let mut content = vec![json!({"type": "text", "text": req.user_prompt})];
    if let Some(img) = &req.image {
        content.push(json!({"type": "image_url", "image_url": {"url": image_data_url(img)?}}));
    }
    Ok(json!({
        "model": model,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": content},
        ],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "user": req.request_id,
    }))
}

impl Backend for HttpBackend {
    fn call(&self, req: &VlmRequest) -> Result<String, CallFailure> {
        let body = chat_completion_body(req, &self.model)?;
        let mut request = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = request.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) => CallFailure::Timeout,
            ureq::Error::StatusCode(s) => CallFailure::Status(s),
            other => CallFailure::Network(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(CallFailure::Status(status));
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| CallFailure::Malformed(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| CallFailure::Malformed("no choices[0].message.content".into()))
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GatePass<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable client. `complete` may be called from several threads; at most
/// `max_in_flight` requests are outstanding at once.
pub struct VlmClient {
    backend: Box<dyn Backend>,
    config: EndpointConfig,
    gate: Gate,
}

impl VlmClient {
    pub fn new(config: EndpointConfig) -> Result<Self, VlmError> {
        config.validate()?;
        let backend: Box<dyn Backend> = match &config.backend {
            BackendConfig::Mock(script) => Box::new(MockBackend {
                script: script.clone(),
                cursor: Mutex::new(0),
            }),
            BackendConfig::Http { url, token, model, timeout_ms } => {
                let agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(*timeout_ms)))
                    .http_status_as_error(false)
                    .build()
                    .into();
                Box::new(HttpBackend {
                    agent,
                    url: url.clone(),
                    token: token.clone(),
                    model: model.clone(),
                })
            }
        };
        Ok(VlmClient {
            backend,
            gate: Gate {
                available: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
            config,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn complete(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        req.validate()?;
        let _pass = self.gate.acquire();
        let delays = self.config.backoff_schedule();
        let start = Instant::now();
        let mut last = None;
        for attempt in 1..=self.config.retry_cap {
            if attempt > 1 {
                let delay = delays[(attempt - 2) as usize];
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
            }
            match self.backend.call(req) {
                Ok(text) if text.trim().is_empty() => return Err(VlmError::EmptyCompletion),
                Ok(text) => {
                    return Ok(VlmResponse {
                        text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err(f) if f.is_transient() => last = Some(f),
                Err(f) => return Err(f.into_error()),
            }
        }
        Err(VlmError::RetriesExhausted {
            attempts: self.config.retry_cap,
            last: last.map(|f| f.describe()).unwrap_or_default(),
        })
    }
}
