//! Chat-completion backends and the retrying `complete` call.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use serde_json::{json, Value};

use super::cost::{
    estimate_prompt_tokens, estimate_tokens, BudgetExceeded, CostMeter, GenerationReceipt,
    Reservation,
};
use super::prompt::PromptEnvelope;

/// Environment variable holding the live backend credential.
pub const API_KEY_ENV: &str = "CLOVER_API_KEY";

/// The one supported request/response dialect (OpenAI-style chat completions).
pub const DIALECT_OPENAI_CHAT: &str = "openai-chat";

#[derive(Debug, Clone)]
pub struct CompletionRequest<'a> {
    pub envelope: &'a PromptEnvelope,
    pub max_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: rate limits, server errors, dropped connections.
    #[error("transient backend failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("backend request failed (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Transient { status, .. } | Self::Fatal { status, .. } => *status,
            Self::Config(_) => None,
        }
    }

    fn is_transient(&self) -> bool {
        matches!(self, Self::Transient { .. })
    }
}

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError>;
}

enum Fixtures {
    Dir(PathBuf),
    Memory(HashMap<String, String>),
}

/// Offline backend answering from fixtures keyed by [`PromptEnvelope::digest`].
/// Reports no usage, so costs fall back to the character estimate.
pub struct MockBackend {
    id: String,
    fixtures: Fixtures,
}

impl MockBackend {
    /// Reads `<digest>.txt` from `dir` for each request.
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            id: "mock".into(),
            fixtures: Fixtures::Dir(dir.into()),
        }
    }

    pub fn from_map(map: HashMap<String, String>) -> Self {
        Self {
            id: "mock".into(),
            fixtures: Fixtures::Memory(map),
        }
    }

    fn lookup(&self, digest: &str) -> Option<String> {
        match &self.fixtures {
            Fixtures::Dir(dir) => std::fs::read_to_string(dir.join(format!("{digest}.txt"))).ok(),
            Fixtures::Memory(map) => map.get(digest).cloned(),
        }
    }
}

impl CompletionBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let digest = request.envelope.digest();
        let text = self.lookup(&digest).ok_or_else(|| BackendError::Fatal {
            status: Some(404),
            message: format!("no fixture {digest}.txt"),
        })?;
        // A live endpoint cannot return more than max_tokens; neither can the mock.
        let tokens = estimate_tokens(&text);
        if tokens > request.max_tokens {
            return Err(BackendError::Fatal {
                status: None,
                message: format!(
                    "fixture {digest}.txt is {tokens} tokens, above max_tokens {}",
                    request.max_tokens
                ),
            });
        }
        Ok(Completion { text, usage: None })
    }
}

/// HTTP chat-completion backend.
pub struct LiveBackend {
    id: String,
    endpoint: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveBackend {
    /// Fails before any network IO when the credential or endpoint is missing,
    /// or the dialect is unsupported.
    pub fn from_env(endpoint: &str, model: &str, dialect: &str) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| BackendError::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::new(endpoint, model, dialect, api_key)
    }

    pub fn new(
        endpoint: &str,
        model: &str,
        dialect: &str,
        api_key: String,
    ) -> Result<Self, BackendError> {
        if endpoint.trim().is_empty() {
            return Err(BackendError::Config("backend.endpoint is empty".into()));
        }
        if dialect != DIALECT_OPENAI_CHAT {
            return Err(BackendError::Config(format!(
                "unsupported dialect '{dialect}' (expected {DIALECT_OPENAI_CHAT})"
            )));
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .new_agent();
        Ok(Self {
            id: format!("live:{model}"),
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            agent,
        })
    }

    fn request_body(&self, request: &CompletionRequest<'_>) -> Value {
        json!({
            "model": self.model,
            "messages": request.envelope.messages,
            "max_tokens": request.max_tokens,
        })
    }
}

fn parse_openai_response(body: &Value) -> Result<Completion, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Fatal {
            status: Some(200),
            message: "response has no choices[0].message.content".into(),
        })?
        .to_string();
    let usage = match (
        body.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        body.pointer("/usage/completion_tokens").and_then(Value::as_u64),
    ) {
        (Some(prompt_tokens), Some(completion_tokens)) => Some(Usage {
            prompt_tokens,
            completion_tokens,
        }),
        _ => None,
    };
    Ok(Completion { text, usage })
}

impl CompletionBackend for LiveBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
        let response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.request_body(request));
        let mut response = match response {
            Ok(r) => r,
            Err(e) => {
                return Err(BackendError::Transient {
                    status: None,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().unwrap_or_default();
        match status {
            200..=299 => {
                let value: Value = serde_json::from_str(&body).map_err(|e| BackendError::Fatal {
                    status: Some(status),
                    message: format!("invalid JSON body: {e}"),
                })?;
                parse_openai_response(&value)
            }
            408 | 409 | 429 | 500..=599 => Err(BackendError::Transient {
                status: Some(status),
                message: truncate(&body, 200),
            }),
            _ => Err(BackendError::Fatal {
                status: Some(status),
                message: truncate(&body, 200),
            }),
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// `base * 2^retry`, capped at `max_delay`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompleteError {
    #[error(transparent)]
    Budget(#[from] BudgetExceeded),
    #[error("{last} (after {attempts} attempt(s))")]
    Backend { last: BackendError, attempts: u32 },
}

/// Sends `request` until it succeeds, fails permanently, or the retry
/// budget is used up. Returns the completion and the number of retries.
pub fn call_with_retry(
    request: &CompletionRequest<'_>,
    backend: &dyn CompletionBackend,
    policy: &RetryPolicy,
) -> Result<(Completion, u32), CompleteError> {
    let mut retries = 0u32;
    loop {
        match backend.complete(request) {
            Ok(c) => return Ok((c, retries)),
            Err(e) if e.is_transient() && retries < policy.max_retries => {
                log::debug!("{e}; retry {} of {}", retries + 1, policy.max_retries);
                std::thread::sleep(policy.delay(retries));
                retries += 1;
            }
            Err(e) => {
                return Err(CompleteError::Backend {
                    last: e,
                    attempts: retries + 1,
                })
            }
        }
    }
}

/// Books a finished completion on the meter and produces its receipt.
pub(crate) fn settle(
    envelope: &PromptEnvelope,
    completion: &Completion,
    retries: u32,
    reservation: Reservation,
    meter: &CostMeter,
    backend_id: &str,
    image_id: &str,
) -> GenerationReceipt {
    let usage = completion.usage.unwrap_or_else(|| Usage {
        prompt_tokens: estimate_prompt_tokens(envelope),
        completion_tokens: estimate_tokens(&completion.text),
    });
    let cost = meter.commit(reservation, usage.prompt_tokens, usage.completion_tokens);
    GenerationReceipt {
        image_id: image_id.to_string(),
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
        estimated_cost_usd: cost,
        backend_id: backend_id.to_string(),
        retries,
    }
}

/// Sends `envelope` through `backend`, retrying transient failures with
/// exponential backoff. The worst-case cost is reserved on `meter` first, so
/// a request that could overrun the budget is never sent.
pub fn complete(
    envelope: &PromptEnvelope,
    backend: &dyn CompletionBackend,
    policy: &RetryPolicy,
    meter: &CostMeter,
    image_id: &str,
) -> Result<(String, GenerationReceipt), CompleteError> {
    let reservation = meter.reserve(envelope)?;
    let request = CompletionRequest {
        envelope,
        max_tokens: meter.max_completion_tokens(),
    };
    match call_with_retry(&request, backend, policy) {
        Ok((completion, retries)) => {
            let receipt = settle(
                envelope,
                &completion,
                retries,
                reservation,
                meter,
                backend.id(),
                image_id,
            );
            Ok((completion.text, receipt))
        }
        Err(e) => {
            meter.release(reservation);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen_forge::cost::Rates;
    use crate::gen_forge::prompt::build_prompt;
    use std::sync::atomic::{AtomicU32, Ordering};

    const RATES: Rates = Rates {
        in_per_1k: 0.0005,
        out_per_1k: 0.0015,
    };

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl CompletionBackend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn complete(&self, _: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient {
                    status: Some(429),
                    message: "slow down".into(),
                })
            } else {
                Ok(Completion {
                    text: "ok".into(),
                    usage: Some(Usage {
                        prompt_tokens: 100,
                        completion_tokens: 20,
                    }),
                })
            }
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(10),
        };
        let delays: Vec<_> = (0..5).map(|i| p.delay(i).as_secs()).collect();
        assert_eq!(delays, vec![1, 2, 4, 8, 10]);
    }

    #[test]
    fn mock_returns_fixture_verbatim() {
        let env = build_prompt("sys", "cap", &[]);
        let text = "Question: a?\nAnswer: b.\n".to_string();
        let backend = MockBackend::from_map(HashMap::from([(env.digest(), text.clone())]));
        let meter = CostMeter::new(RATES, 1.0, 512);
        let (out, receipt) = complete(&env, &backend, &fast(), &meter, "img").unwrap();
        assert_eq!(out, text);
        assert_eq!(receipt.retries, 0);
        assert_eq!(receipt.prompt_tokens, estimate_prompt_tokens(&env));
        assert_eq!(receipt.completion_tokens, estimate_tokens(&text));
        assert_eq!(
            receipt.estimated_cost_usd,
            RATES.cost(receipt.prompt_tokens, receipt.completion_tokens)
        );
    }

    #[test]
    fn mock_dir_and_missing_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let env = build_prompt("sys", "cap", &[]);
        std::fs::write(dir.path().join(format!("{}.txt", env.digest())), "hello").unwrap();
        let backend = MockBackend::from_dir(dir.path());
        let req = CompletionRequest {
            envelope: &env,
            max_tokens: 10,
        };
        assert_eq!(backend.complete(&req).unwrap().text, "hello");
        let other = build_prompt("sys", "other", &[]);
        let err = backend
            .complete(&CompletionRequest {
                envelope: &other,
                max_tokens: 10,
            })
            .unwrap_err();
        assert_eq!(err.status(), Some(404));
        let tight = CompletionRequest {
            envelope: &env,
            max_tokens: 1,
        };
        assert!(matches!(backend.complete(&tight), Err(BackendError::Fatal { .. })));
    }

    #[test]
    fn retries_are_counted_in_receipt() {
        let backend = Flaky {
            failures: 1,
            calls: AtomicU32::new(0),
        };
        let env = build_prompt("sys", "cap", &[]);
        let meter = CostMeter::new(RATES, 1.0, 512);
        let (_, receipt) = complete(&env, &backend, &fast(), &meter, "img").unwrap();
        assert_eq!(receipt.retries, 1);
        assert_eq!(receipt.prompt_tokens, 100);
        assert_eq!(receipt.completion_tokens, 20);
    }

    #[test]
    fn exhausted_retries_carry_last_status() {
        let backend = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
        };
        let env = build_prompt("sys", "cap", &[]);
        let meter = CostMeter::new(RATES, 1.0, 512);
        match complete(&env, &backend, &fast(), &meter, "img") {
            Err(CompleteError::Backend { last, attempts }) => {
                assert_eq!(last.status(), Some(429));
                assert_eq!(attempts, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 4);
        assert_eq!(meter.spent(), 0.0);
        // nothing left reserved
        assert!(meter.reserve(&env).is_ok());
    }

    #[test]
    fn budget_guard_refuses_before_sending() {
        let backend = Flaky {
            failures: 0,
            calls: AtomicU32::new(0),
        };
        let env = build_prompt("sys", "cap", &[]);
        // 512 completion tokens alone project to 0.000768 USD
        let meter = CostMeter::new(RATES, 0.0005, 512);
        assert!(matches!(
            complete(&env, &backend, &fast(), &meter, "img"),
            Err(CompleteError::Budget(_))
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn live_backend_requires_credential_and_endpoint() {
        assert!(matches!(
            LiveBackend::new("", "m", DIALECT_OPENAI_CHAT, "k".into()),
            Err(BackendError::Config(_))
        ));
        assert!(matches!(
            LiveBackend::new("http://x", "m", "anthropic", "k".into()),
            Err(BackendError::Config(_))
        ));
    }

    #[test]
    fn openai_response_parsing() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "hi"}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 2}
        });
        let c = parse_openai_response(&body).unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(
            c.usage,
            Some(Usage {
                prompt_tokens: 7,
                completion_tokens: 2
            })
        );
        let no_usage = json!({"choices": [{"message": {"content": "x"}}]});
        assert_eq!(parse_openai_response(&no_usage).unwrap().usage, None);
        assert!(parse_openai_response(&json!({})).is_err());
    }
}
