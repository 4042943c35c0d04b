//! Remote chat-completion ranker.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::parse::parse_response;
use super::prompt::{render_prompt, PromptDocument, PromptPart};
use super::{RankError, RankOutcome, RankRequest, RankedList, Ranker, RankerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: f64,
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub backoff_base_ms: u64,
    pub backoff_factor: u32,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "qwen2-vl-7b-instruct".into(),
            timeout_secs: 60.0,
            max_attempts: 5,
            temperature: 0.0,
            api_key_env: "SETEXP_API_KEY".into(),
            backoff_base_ms: 1000,
            backoff_factor: 2,
        }
    }
}

impl ChatConfig {
    /// Delay before retry number `retry` (1-based): base * factor^(retry-1).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = u64::from(self.backoff_factor).saturating_pow(retry.saturating_sub(1));
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    pub status: Option<u16>,
    pub retryable: bool,
}

impl TransportError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            status: None,
            retryable: false,
        }
    }

    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            status: None,
            retryable: true,
        }
    }

    pub fn from_status(status: u16, body: &str) -> Self {
        Self {
            message: format!("HTTP {status}: {body}"),
            status: Some(status),
            retryable: status == 429 || (500..600).contains(&status),
        }
    }
}

/// Sends one chat-completion request body and returns the reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, body: &Value) -> Result<String, TransportError>;
}

/// Builds the chat-completion body. Image parts keep their original reference.
pub fn request_body(config: &ChatConfig, prompt: &PromptDocument) -> Value {
    let content: Vec<Value> = prompt
        .parts
        .iter()
        .map(|part| match part {
            PromptPart::Text(text) => json!({"type": "text", "text": text}),
            PromptPart::Image(reference) => json!({"type": "image_url", "image_url": {"url": reference}}),
        })
        .collect();
    json!({
        "model": config.model,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": content}],
    })
}

/// Extracts the first choice's message content.
pub fn response_text(body: &Value) -> Result<String, TransportError> {
    let content = &body["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(TransportError::fatal("response has no choices[0].message.content")),
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// Local paths become base64 data URIs; URIs pass through.
fn inline_images(body: &Value) -> Result<Value, TransportError> {
    let mut body = body.clone();
    if let Some(messages) = body["messages"].as_array_mut() {
        for message in messages {
            let Some(parts) = message["content"].as_array_mut() else {
                continue;
            };
            for part in parts {
                let Some(url) = part["image_url"]["url"].as_str() else {
                    continue;
                };
                if ["http://", "https://", "data:"].iter().any(|p| url.starts_with(p)) {
                    continue;
                }
                let path = Path::new(url.strip_prefix("file://").unwrap_or(url));
                let bytes = fs::read(path)
                    .map_err(|e| TransportError::fatal(format!("cannot read image {}: {e}", path.display())))?;
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                part["image_url"]["url"] = Value::String(format!("data:{};base64,{encoded}", mime_for(path)));
            }
        }
    }
    Ok(body)
}

/// Blocking HTTP transport for OpenAI-compatible endpoints.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &ChatConfig) -> Result<Self, RankError> {
        if config.timeout_secs.is_nan() || config.timeout_secs <= 0.0 {
            return Err(RankError::Config("timeout must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| RankError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: std::env::var(&config.api_key_env).ok(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, body: &Value) -> Result<String, TransportError> {
        let body = inline_images(body)?;
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| TransportError::transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| TransportError::transient(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::from_status(status, &text));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| TransportError::fatal(format!("malformed response body: {e}")))?;
        response_text(&value)
    }
}

/// Ranks lists by prompting a chat model.
pub struct ChatRanker<T> {
    transport: T,
    config: ChatConfig,
    sleep: fn(Duration),
}

impl ChatRanker<HttpTransport> {
    pub fn http(config: ChatConfig) -> Result<Self, RankError> {
        Ok(Self::new(HttpTransport::new(&config)?, config))
    }
}

impl<T: ChatTransport> ChatRanker<T> {
    pub fn new(transport: T, config: ChatConfig) -> Self {
        Self {
            transport,
            config,
            sleep: thread::sleep,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Replaces the backoff sleeper (tests).
    pub fn with_sleeper(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    fn call_with_retry(&self, body: &Value) -> Result<String, TransportError> {
        let attempts = self.config.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.transport.complete(body) {
                Ok(text) => return Ok(text),
                Err(err) if err.retryable && attempt < attempts => {
                    let delay = self.config.backoff(attempt);
                    debug!("attempt {attempt}/{attempts} failed ({err}); retrying in {delay:?}");
                    (self.sleep)(delay);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

impl<T: ChatTransport> Ranker for ChatRanker<T> {
    fn kind(&self) -> RankerKind {
        RankerKind::RemoteChat
    }

    fn rank(&self, request: &RankRequest<'_>) -> Result<RankOutcome, RankError> {
        let prompt = render_prompt(&request.seeds, &request.members)?;
        let body = request_body(&self.config, &prompt);
        let started = Instant::now();
        let reply = self.call_with_retry(&body);
        let latency_ms = started.elapsed().as_millis() as u64;
        let surfaces: Vec<&str> = request.members.iter().map(|e| e.surface.as_str()).collect();

        let (response, parsed, error) = match reply {
            Ok(text) => {
                let parsed = parse_response(&text, &surfaces);
                let error = parsed.as_ref().err().map(|e| e.to_string());
                (Some(text), parsed.ok(), error)
            }
            Err(err) => {
                warn!("list {}: transport failed: {err}", request.list.list_id);
                (None, None, Some(err.to_string()))
            }
        };
        let (positions, degraded, repairs) = match parsed {
            Some(p) => (
                p.order.iter().map(|&i| request.list.members[i].clone()).collect(),
                false,
                p.repairs,
            ),
            None => (request.list.members.clone(), true, 0),
        };
        Ok(RankOutcome {
            ranked: RankedList {
                list_id: request.list.list_id.clone(),
                positions,
            },
            degraded,
            repairs,
            request: body,
            response,
            error,
            latency_ms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn backoff_doubles_from_one_second() {
        let c = ChatConfig::default();
        let delays: Vec<u64> = (1..5).map(|r| c.backoff(r).as_millis() as u64).collect();
        assert_eq!(delays, vec![1000, 2000, 4000, 8000]);
    }

    #[test]
    fn status_classification() {
        assert!(TransportError::from_status(429, "").retryable);
        assert!(TransportError::from_status(503, "").retryable);
        assert!(!TransportError::from_status(400, "").retryable);
    }

    #[test]
    fn response_text_variants() {
        let v = json!({"choices": [{"message": {"content": "A > B"}}]});
        assert_eq!(response_text(&v).unwrap(), "A > B");
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "A"}, {"type": "text", "text": " > B"}]}}]});
        assert_eq!(response_text(&v).unwrap(), "A > B");
        assert!(response_text(&json!({})).is_err());
    }

    #[test]
    fn local_images_are_inlined() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        fs::write(&path, b"\x89PNG").unwrap();
        let doc = PromptDocument {
            parts: vec![
                PromptPart::Text("hi".into()),
                PromptPart::Image(path.display().to_string()),
                PromptPart::Image("https://example.org/a.jpg".into()),
            ],
        };
        let body = inline_images(&request_body(&ChatConfig::default(), &doc)).unwrap();
        let content = &body["messages"][0]["content"];
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
        assert_eq!(content[2]["image_url"]["url"], "https://example.org/a.jpg");
        assert_eq!(body["temperature"], 0.0);
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
        error: TransportError,
    }

    impl ChatTransport for Flaky {
        fn complete(&self, _: &Value) -> Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn no_sleep(_: Duration) {}

    #[test]
    fn retries_transient_errors_up_to_the_limit() {
        let ranker = ChatRanker::new(
            Flaky {
                calls: AtomicUsize::new(0),
                fail_first: 4,
                error: TransportError::from_status(500, ""),
            },
            ChatConfig::default(),
        )
        .with_sleeper(no_sleep);
        assert_eq!(ranker.call_with_retry(&json!({})).unwrap(), "ok");
        assert_eq!(ranker.transport.calls.load(Ordering::SeqCst), 5);

        let ranker = ChatRanker::new(
            Flaky {
                calls: AtomicUsize::new(0),
                fail_first: 5,
                error: TransportError::transient("reset"),
            },
            ChatConfig::default(),
        )
        .with_sleeper(no_sleep);
        assert!(ranker.call_with_retry(&json!({})).is_err());
        assert_eq!(ranker.transport.calls.load(Ordering::SeqCst), 5);

        let ranker = ChatRanker::new(
            Flaky {
                calls: AtomicUsize::new(0),
                fail_first: 1,
                error: TransportError::from_status(401, ""),
            },
            ChatConfig::default(),
        )
        .with_sleeper(no_sleep);
        assert!(ranker.call_with_retry(&json!({})).is_err());
        assert_eq!(ranker.transport.calls.load(Ordering::SeqCst), 1);
    }
}
