//! Chat-completion gateway: a live OpenAI-compatible HTTP client and a
//! fingerprint-keyed replay store that share one [`ChatBackend`] contract.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mock_llm::ScriptedLlm;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    TransportError { attempts: u32, message: String },
    #[error("no replay fixture for fingerprint {0}")]
    FixtureMiss(String),
    #[error("fixture i/o error on {path}")]
    FixtureIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    /// A deterministic (temperature 0) single-turn request.
    pub fn new(model: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage_prompt_tokens: u64,
    pub usage_output_tokens: u64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Replay,
    /// Offline scripted model; see [`crate::mock_llm`].
    Mock,
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "replay" => Ok(Self::Replay),
            "mock" => Ok(Self::Mock),
            other => Err(format!("unknown gateway mode `{other}` (expected live|replay|mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub base_url: String,
    pub api_key_env: String,
    pub fixture_dir: PathBuf,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    /// Live and mock modes: write every response into `fixture_dir` for later replay.
    pub record_fixtures: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Replay,
            base_url: "http://localhost:8000/v1".to_string(),
            api_key_env: "MRAG_API_KEY".to_string(),
            fixture_dir: PathBuf::from("fixtures"),
            max_retries: 3,
            retry_backoff_ms: 500,
            max_in_flight: 4,
            timeout_ms: 600_000,
            record_fixtures: false,
        }
    }
}

/// Anything that can answer a single chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Lowercase-hex SHA-256 over the length-prefixed (u64 LE) encodings of
/// model, system text and user text.
pub fn fingerprint(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for field in [&req.model, &req.system_text, &req.user_text] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field.as_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn fixture_path(dir: &Path, fingerprint: &str) -> PathBuf {
    dir.join(format!("{fingerprint}.txt"))
}

/// Fixture for the `occurrence`-th identical request (1-based). Repeats of a
/// request, such as extraction retries, may carry their own answers as
/// `{fp}.{n}.txt`; the plain `{fp}.txt` serves the first call and any repeat
/// without a dedicated file.
pub fn fixture_path_for(dir: &Path, fingerprint: &str, occurrence: usize) -> PathBuf {
    if occurrence <= 1 {
        fixture_path(dir, fingerprint)
    } else {
        dir.join(format!("{fingerprint}.{occurrence}.txt"))
    }
}

/// Store `text` as the replay answer for `req`.
pub fn write_fixture(dir: &Path, req: &ChatRequest, text: &str) -> Result<PathBuf, GatewayError> {
    write_fixture_at(dir, req, 1, text)
}

pub fn write_fixture_at(dir: &Path, req: &ChatRequest, occurrence: usize, text: &str) -> Result<PathBuf, GatewayError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| GatewayError::FixtureIo { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = fixture_path_for(dir, &fingerprint(req), occurrence);
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Counts how often each fingerprint has been requested in this process.
#[derive(Default)]
struct Occurrences(Mutex<HashMap<String, usize>>);

impl Occurrences {
    fn next(&self, fp: &str) -> usize {
        let mut seen = self.0.lock().expect("occurrence map poisoned");
        let n = seen.entry(fp.to_string()).or_default();
        *n += 1;
        *n
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// The configured gateway. Modes never fall back to each other.
pub struct Gateway {
    cfg: GatewayConfig,
    client: Option<reqwest::blocking::Client>,
    in_flight: Semaphore,
    seen: Occurrences,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Result<Self, GatewayError> {
        let client = match cfg.mode {
            GatewayMode::Live => Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_millis(cfg.timeout_ms))
                    .build()
                    .map_err(|e| GatewayError::TransportError {
                        attempts: 0,
                        message: e.to_string(),
                    })?,
            ),
            GatewayMode::Replay | GatewayMode::Mock => None,
        };
        let in_flight = Semaphore::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            client,
            in_flight,
            seen: Occurrences::default(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    fn replay(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let start = Instant::now();
        let fp = fingerprint(req);
        let n = self.seen.next(&fp);
        let mut path = fixture_path_for(&self.cfg.fixture_dir, &fp, n);
        if n > 1 && !path.exists() {
            path = fixture_path(&self.cfg.fixture_dir, &fp);
        }
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::FixtureMiss(fp));
            }
            Err(source) => {
                return Err(GatewayError::FixtureIo {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        Ok(ChatResponse {
            text,
            usage_prompt_tokens: 0,
            usage_output_tokens: 0,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn live(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = std::env::var(&self.cfg.api_key_env)
            .map_err(|_| GatewayError::MissingApiKey(self.cfg.api_key_env.clone()))?;
        let client = self.client.as_ref().expect("live gateway has a client");
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));

        let mut messages = Vec::with_capacity(2);
        if !req.system_text.is_empty() {
            messages.push(WireMessage { role: "system", content: &req.system_text });
        }
        messages.push(WireMessage { role: "user", content: &req.user_text });
        let body = serde_json::to_string(&WireRequest {
            model: &req.model,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
        })
        .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        log::debug!("POST {url} (authorization: Bearer <redacted>) body={body}");

        let _permit = self.in_flight.acquire();
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = client
                .post(&url)
                .bearer_auth(&key)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone())
                .send();
            let transient = match outcome {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        log::debug!("response ({status}) body={text}");
                        return parse_completion(&text, start.elapsed().as_secs_f64() * 1e3);
                    }
                    let message = format!("HTTP {status}: {text}");
                    if status.as_u16() == 429 || status.is_server_error() {
                        message
                    } else {
                        return Err(GatewayError::TransportError { attempts, message });
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempts > self.cfg.max_retries {
                return Err(GatewayError::TransportError {
                    attempts,
                    message: transient,
                });
            }
            let backoff = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
            log::warn!("transient failure ({transient}); retry {attempts} in {backoff} ms");
            std::thread::sleep(Duration::from_millis(backoff));
        }
    }
}

fn parse_completion(body: &str, latency_ms: f64) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let text = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::MalformedResponse("no assistant content".into()))?;
    let (p, o) = wire
        .usage
        .map(|u| (u.prompt_tokens, u.completion_tokens))
        .unwrap_or((0, 0));
    Ok(ChatResponse {
        text,
        usage_prompt_tokens: p,
        usage_output_tokens: o,
        latency_ms,
    })
}

impl ChatBackend for Gateway {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if req.temperature != 0.0 {
            log::warn!("non-zero temperature {} for model {}", req.temperature, req.model);
        }
        log::debug!("gateway call mode={:?} model={} fp={}", self.cfg.mode, req.model, fingerprint(req));
        match self.cfg.mode {
            GatewayMode::Replay => self.replay(req),
            GatewayMode::Live | GatewayMode::Mock => {
                let resp = if self.cfg.mode == GatewayMode::Live {
                    self.live(req)?
                } else {
                    ScriptedLlm.complete(req)?
                };
                if self.cfg.record_fixtures {
                    let n = self.seen.next(&fingerprint(req));
                    write_fixture_at(&self.cfg.fixture_dir, req, n, &resp.text)?;
                }
                Ok(resp)
            }
        }
    }
}

/// Wraps a backend and writes every response into a fixture directory.
pub struct Recorder<B> {
    inner: B,
    dir: PathBuf,
    seen: Occurrences,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            seen: Occurrences::default(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let resp = self.inner.complete(req)?;
        let n = self.seen.next(&fingerprint(req));
        write_fixture_at(&self.dir, req, n, &resp.text)?;
        Ok(resp)
    }
}
