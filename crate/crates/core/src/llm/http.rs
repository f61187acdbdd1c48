//! Blocking chat-completion client (OpenAI-style JSON) with an optional
//! JSONL audit log.

use super::{ChatBackend, EvaluatorRequest, EvaluatorResponse, LlmError, Usage};
use serde::Deserialize;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub const ENV_ENDPOINT: &str = "LOCOMAN_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "LOCOMAN_LLM_MODEL";
pub const ENV_API_KEY: &str = "LOCOMAN_LLM_API_KEY";
pub const ENV_AUDIT: &str = "LOCOMAN_LLM_AUDIT";

pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: String,
    timeout: Duration,
    audit: Option<Mutex<PathBuf>>,
}

#[derive(Deserialize)]
struct Body {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, model: &str, api_key: &str) -> Result<Self, LlmError> {
        if endpoint.is_empty() || api_key.is_empty() {
            return Err(LlmError::Config("endpoint and API key are required".into()));
        }
        Ok(Self {
            endpoint: endpoint.into(),
            model: if model.is_empty() { "default".into() } else { model.into() },
            api_key: api_key.into(),
            timeout: Duration::from_secs(30),
            audit: None,
        })
    }

    /// Reads the endpoint, model, key and audit path from the environment.
    /// Fails before any network traffic when the endpoint or key is unset.
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).unwrap_or_default();
        let endpoint = var(ENV_ENDPOINT);
        let key = var(ENV_API_KEY);
        if endpoint.is_empty() {
            return Err(LlmError::Config(format!("{ENV_ENDPOINT} is not set")));
        }
        if key.is_empty() {
            return Err(LlmError::Config(format!("{ENV_API_KEY} is not set")));
        }
        let mut client = Self::new(&endpoint, &var(ENV_MODEL), &key)?;
        let audit = var(ENV_AUDIT);
        if !audit.is_empty() {
            client = client.with_audit(audit);
        }
        Ok(client)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_audit(mut self, path: impl Into<PathBuf>) -> Self {
        self.audit = Some(Mutex::new(path.into()));
        self
    }

    fn log(&self, hash: &str, latency: Duration, outcome: &str) {
        let Some(path) = &self.audit else { return };
        let path = path.lock().unwrap_or_else(|e| e.into_inner());
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let record = serde_json::json!({
            "timestamp": timestamp,
            "hash": hash,
            "latency_ms": latency.as_secs_f64() * 1e3,
            "outcome": outcome,
        });
        if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(&*path) {
            let _ = writeln!(f, "{record}");
        }
    }

    fn send(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse, LlmError> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let payload = serde_json::json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let result = agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_string(&payload.to_string());
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                return Err(LlmError::Status {
                    status,
                    body: r.into_string().unwrap_or_default(),
                })
            }
            Err(ureq::Error::Transport(t)) => return Err(self.transport_error(&t.to_string())),
        };
        let text = response.into_string().map_err(|e| self.transport_error(&e.to_string()))?;
        let body: Body = serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Malformed("no choices in response".into()))?;
        let usage = body.usage.map_or(Usage::default(), |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Ok(EvaluatorResponse {
            text: choice.message.content,
            usage,
        })
    }

    fn transport_error(&self, message: &str) -> LlmError {
        let lower = message.to_lowercase();
        if lower.contains("timed out") || lower.contains("timeout") || lower.contains("would block") {
            LlmError::Timeout(self.timeout.as_secs_f64())
        } else {
            LlmError::Network(message.to_string())
        }
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &EvaluatorRequest) -> Result<EvaluatorResponse, LlmError> {
        let started = Instant::now();
        let result = self.send(request);
        let outcome = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        self.log(&request.hash(), started.elapsed(), &outcome);
        result
    }
}
