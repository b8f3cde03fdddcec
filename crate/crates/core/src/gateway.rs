//! Chat-completion transport: a configurable HTTP backend with retries and
//! bounded concurrency, plus a deterministic mock backend for tests and
//! desk-scale runs.
//!
//! Every prompt is an independent request; no conversational state is ever
//! shared between requests, so content cannot leak across interviews. The
//! mock backend keeps an append-only request log that tests use to verify
//! exactly that.

use std::io::Write;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::catalog::hex_digest;

/// Remote endpoint configuration.
///
/// The wire protocol is `POST {endpoint_url}/v1/chat/completions` with a
/// JSON body `{model, messages: [{role: "user", content}], temperature,
/// max_tokens}` — one user message per request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub max_context_tokens: u32,
    pub request_timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub retry_base_delay_ms: u64,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint_url: String::new(),
            model_name: String::new(),
            temperature: 0.0,
            max_output_tokens: 512,
            max_context_tokens: 128_000,
            request_timeout_ms: 120_000,
            max_retries: 3,
            max_in_flight: 4,
            retry_base_delay_ms: 500,
            api_key_env: "MADRS_API_KEY".to_string(),
        }
    }
}

/// One completion, with transport bookkeeping.
#[derive(Debug, Clone)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency: Duration,
    /// 1-based attempt on which the request succeeded.
    pub attempt: u32,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt of ~{estimated_tokens} tokens exceeds the {limit}-token context window")]
    ContextOverflow { estimated_tokens: u32, limit: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned non-retryable status {status}: {message}")]
    Endpoint { status: u16, message: String },
}

/// A deterministic completion policy: a pure function of (prompt, seed).
pub trait MockPolicy: Send + Sync {
    fn respond(&self, prompt: &str, seed: u64) -> String;
}

/// Deterministic in-process backend.
pub struct MockBackend {
    policy: Arc<dyn MockPolicy>,
    seed: u64,
    max_in_flight: usize,
    /// Applied before "sending", mirroring the remote overflow gate.
    pub max_context_tokens: Option<u32>,
    log: Arc<Mutex<Vec<String>>>,
}

impl MockBackend {
    pub fn new(policy: Arc<dyn MockPolicy>, seed: u64) -> MockBackend {
        MockBackend {
            policy,
            seed,
            max_in_flight: 8,
            max_context_tokens: None,
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }
}

pub enum Backend {
    Remote(LlmConfig),
    Mock(MockBackend),
}

/// Sends prompts through the configured backend, enforcing the in-flight
/// bound across all concurrent callers and writing an optional audit log.
pub struct Gateway {
    backend: Backend,
    permits: Arc<FlightPermits>,
    audit: Option<Arc<Mutex<Box<dyn Write + Send>>>>,
    client: Arc<OnceLock<reqwest::blocking::Client>>,
}

impl Gateway {
    pub fn new(backend: Backend) -> Gateway {
        let max_in_flight = match &backend {
            Backend::Remote(cfg) => cfg.max_in_flight.max(1),
            Backend::Mock(mock) => mock.max_in_flight.max(1),
        };
        Gateway {
            backend,
            permits: Arc::new(FlightPermits::new(max_in_flight)),
            audit: None,
            client: Arc::new(OnceLock::new()),
        }
    }

    pub fn mock(policy: Arc<dyn MockPolicy>, seed: u64) -> Gateway {
        Gateway::new(Backend::Mock(MockBackend::new(policy, seed)))
    }

    pub fn with_audit(mut self, sink: Box<dyn Write + Send>) -> Gateway {
        self.audit = Some(Arc::new(Mutex::new(sink)));
        self
    }

    /// A view of this gateway with the mock seed salted by `salt`.
    ///
    /// Remote backends are unchanged. The mock request log and the audit
    /// sink are shared with the parent, so leakage checks see all traffic.
    pub fn reseeded(&self, salt: u64) -> Gateway {
        let backend = match &self.backend {
            Backend::Remote(cfg) => Backend::Remote(cfg.clone()),
            Backend::Mock(mock) => Backend::Mock(MockBackend {
                policy: Arc::clone(&mock.policy),
                seed: mock
                    .seed
                    .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                max_in_flight: mock.max_in_flight,
                max_context_tokens: mock.max_context_tokens,
                log: Arc::clone(&mock.log),
            }),
        };
        Gateway {
            backend,
            permits: Arc::clone(&self.permits),
            audit: self.audit.clone(),
            client: Arc::clone(&self.client),
        }
    }

    /// All prompts the mock backend has served, in service order.
    pub fn mock_request_log(&self) -> Option<Vec<String>> {
        match &self.backend {
            Backend::Mock(mock) => Some(mock.log.lock().expect("request log poisoned").clone()),
            Backend::Remote(_) => None,
        }
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, Backend::Mock(_))
    }

    /// Send one prompt and return the completion.
    ///
    /// Transient failures (timeouts, 429, 5xx) are retried with exponential
    /// backoff up to `max_retries` times; the overflow gate runs before any
    /// network traffic.
    pub fn complete(&self, prompt: &str) -> Result<LlmResponse, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let estimated_tokens = estimate_tokens(prompt);
        let limit = match &self.backend {
            Backend::Remote(cfg) => Some(cfg.max_context_tokens),
            Backend::Mock(mock) => mock.max_context_tokens,
        };
        if let Some(limit) = limit {
            if estimated_tokens > limit {
                let err = LlmError::ContextOverflow {
                    estimated_tokens,
                    limit,
                };
                self.audit_failure(prompt, &err);
                return Err(err);
            }
        }

        let _permit = self.permits.acquire();
        let started = Instant::now();
        let result = match &self.backend {
            Backend::Mock(mock) => {
                let text = mock.policy.respond(prompt, mock.seed);
                mock.log
                    .lock()
                    .expect("request log poisoned")
                    .push(prompt.to_string());
                Ok(LlmResponse {
                    prompt_tokens: estimated_tokens,
                    completion_tokens: estimate_tokens(&text),
                    text,
                    latency: started.elapsed(),
                    attempt: 1,
                })
            }
            Backend::Remote(cfg) => self.complete_remote(cfg, prompt, started),
        };
        match &result {
            Ok(response) => self.audit_success(prompt, response),
            Err(err) => self.audit_failure(prompt, err),
        }
        result
    }

    /// Send a batch of prompts with at most `max_in_flight` outstanding.
    ///
    /// Results are positionally aligned with the inputs and per-prompt
    /// failures are isolated; the batch never aborts wholesale.
    pub fn run_batch(&self, prompts: &[String]) -> Vec<Result<LlmResponse, LlmError>> {
        let workers = self.permits.capacity().min(prompts.len().max(1));
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<LlmResponse, LlmError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let outcome = self.complete(&prompts[i]);
                    *results[i].lock().expect("result slot poisoned") = Some(outcome);
                });
            }
        });
        results
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("result slot poisoned")
                    .expect("every slot is filled")
            })
            .collect()
    }

    fn complete_remote(
        &self,
        cfg: &LlmConfig,
        prompt: &str,
        started: Instant,
    ) -> Result<LlmResponse, LlmError> {
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_millis(cfg.request_timeout_ms))
                .build()
                .expect("HTTP client construction cannot fail")
        });
        let url = format!(
            "{}/v1/chat/completions",
            cfg.endpoint_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_output_tokens,
        });
        let api_key = std::env::var(&cfg.api_key_env).ok();

        let mut last_message = String::new();
        for attempt in 1..=cfg.max_retries + 1 {
            let mut request = client.post(&url).json(&body);
            if let Some(key) = &api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let parsed: ChatCompletionResponse =
                            response.json().map_err(|e| LlmError::Transport {
                                attempts: attempt,
                                message: format!("malformed completion body: {e}"),
                            })?;
                        let text = parsed
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| LlmError::Transport {
                                attempts: attempt,
                                message: "completion body has no choices".to_string(),
                            })?;
                        let usage = parsed.usage.unwrap_or_default();
                        return Ok(LlmResponse {
                            prompt_tokens: usage.prompt_tokens,
                            completion_tokens: usage.completion_tokens,
                            text,
                            latency: started.elapsed(),
                            attempt,
                        });
                    }
                    let code = status.as_u16();
                    let message = response.text().unwrap_or_default();
                    let retryable = code == 429 || (500..600).contains(&code);
                    if !retryable {
                        return Err(LlmError::Endpoint {
                            status: code,
                            message: truncate(&message, 500),
                        });
                    }
                    last_message = format!("status {code}: {}", truncate(&message, 200));
                }
                Err(e) => {
                    last_message = e.to_string();
                }
            }
            if attempt <= cfg.max_retries {
                let backoff = cfg
                    .retry_base_delay_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff.min(30_000)));
            }
        }
        Err(LlmError::Transport {
            attempts: cfg.max_retries + 1,
            message: last_message,
        })
    }

    fn audit_success(&self, prompt: &str, response: &LlmResponse) {
        self.audit_write(&serde_json::json!({
            "backend": if self.is_mock() { "mock" } else { "remote" },
            "prompt_sha256": prompt_hash(prompt),
            "outcome": "ok",
            "attempt": response.attempt,
            "latency_ms": response.latency.as_millis() as u64,
            "prompt_tokens": response.prompt_tokens,
            "completion_tokens": response.completion_tokens,
        }));
    }

    fn audit_failure(&self, prompt: &str, err: &LlmError) {
        self.audit_write(&serde_json::json!({
            "backend": if self.is_mock() { "mock" } else { "remote" },
            "prompt_sha256": prompt_hash(prompt),
            "outcome": "error",
            "error": err.to_string(),
        }));
    }

    fn audit_write(&self, record: &serde_json::Value) {
        if let Some(sink) = &self.audit {
            let mut sink = sink.lock().expect("audit sink poisoned");
            // Audit logging is best-effort; a full disk must not fail runs.
            let _ = writeln!(sink, "{record}");
            let _ = sink.flush();
        }
    }
}

/// Character-count/4 heuristic used by the pre-send overflow gate; exact
/// accounting is the server's job.
pub fn estimate_tokens(prompt: &str) -> u32 {
    prompt.len().div_ceil(4) as u32
}

/// Hex SHA-256 of a prompt, used in audit and run records.
pub fn prompt_hash(prompt: &str) -> String {
    hex_digest(prompt.as_bytes())
}

#[derive(Debug, Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Default, Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// Counting semaphore bounding concurrently outstanding requests.
struct FlightPermits {
    capacity: usize,
    state: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a>(&'a FlightPermits);

impl FlightPermits {
    fn new(capacity: usize) -> FlightPermits {
        FlightPermits {
            capacity,
            state: Mutex::new(capacity),
            available: Condvar::new(),
        }
    }

    fn capacity(&self) -> usize {
        self.capacity
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.state.lock().expect("permit state poisoned");
        while *free == 0 {
            free = self.available.wait(free).expect("permit state poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.state.lock().expect("permit state poisoned");
        *free += 1;
        self.0.available.notify_one();
    }
}
