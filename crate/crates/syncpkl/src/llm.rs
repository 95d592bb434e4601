//! Chat-completion client boundary with live, record, and replay modes.
//!
//! Fixtures are one file per request key: the canonicalized request plus the
//! raw response text. Diffable, committable test assets. Credentials come
//! from the environment and are never stored in fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FIXTURE_LAYOUT_VERSION: u32 = 1;

/// Endpoint URL, e.g. `https://api.example.com/v1/chat/completions`.
pub const ENDPOINT_ENV: &str = "SYNCPKL_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "SYNCPKL_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must be non-empty".into()));
        }
        if let Some(first) = self.messages.iter().find(|m| m.role != Role::System) {
            if first.role != Role::User {
                return Err(LlmError::InvalidRequest(
                    "first non-system message must have role user".into(),
                ));
            }
        }
        if self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable fixture key: SHA-256 of the canonical JSON encoding of
    /// (model_id, messages, temperature, max_tokens).
    pub fn key(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub latency_ms: f64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no fixture for request key {0}")]
    FixtureMissing(String),
    #[error("fixture store error: {0}")]
    FixtureStore(String),
    #[error("transport error after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("{0} not set (required for live/record mode)")]
    MissingEnv(&'static str),
}

/// One fixture file: the canonical request and the raw response.
#[derive(Debug, Serialize, Deserialize)]
struct Fixture {
    layout_version: u32,
    request: CompletionRequest,
    response_text: String,
    finish_reason: FinishReason,
    usage: Usage,
}

pub struct LlmClient {
    pub mode: ClientMode,
    pub fixture_dir: PathBuf,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    /// Timeout per live request.
    pub timeout: Duration,
}

impl LlmClient {
    pub fn new(mode: ClientMode, fixture_dir: impl Into<PathBuf>) -> Self {
        LlmClient {
            mode,
            fixture_dir: fixture_dir.into(),
            max_attempts: 5,
            backoff_base_ms: 250,
            timeout: Duration::from_secs(60),
        }
    }

    fn fixture_path(&self, key: &str) -> PathBuf {
        self.fixture_dir.join(format!("{key}.json"))
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.validate()?;
        let key = request.key();
        match self.mode {
            ClientMode::Replay => self.replay(&key),
            ClientMode::Live => self.live(request),
            ClientMode::Record => {
                // A prior recording for the same key is reused, so recording
                // runs are resumable.
                if self.fixture_path(&key).exists() {
                    return self.replay(&key);
                }
                let result = self.live(request)?;
                self.store_fixture(&key, request, &result)?;
                Ok(result)
            }
        }
    }

    fn replay(&self, key: &str) -> Result<CompletionResult, LlmError> {
        let path = self.fixture_path(key);
        let bytes =
            fs::read(&path).map_err(|_| LlmError::FixtureMissing(key.to_string()))?;
        let fixture: Fixture = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::FixtureStore(format!("{}: {e}", path.display())))?;
        Ok(CompletionResult {
            text: fixture.response_text,
            finish_reason: fixture.finish_reason,
            usage: fixture.usage,
            latency_ms: 0.0,
            cache_hit: true,
        })
    }

    fn store_fixture(
        &self,
        key: &str,
        request: &CompletionRequest,
        result: &CompletionResult,
    ) -> Result<(), LlmError> {
        let fixture = Fixture {
            layout_version: FIXTURE_LAYOUT_VERSION,
            request: request.clone(),
            response_text: result.text.clone(),
            finish_reason: result.finish_reason,
            usage: result.usage,
        };
        let body = serde_json::to_vec_pretty(&fixture)
            .map_err(|e| LlmError::FixtureStore(e.to_string()))?;
        write_atomic(&self.fixture_path(key), &body)
            .map_err(|e| LlmError::FixtureStore(e.to_string()))
    }

    fn live(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let endpoint =
            std::env::var(ENDPOINT_ENV).map_err(|_| LlmError::MissingEnv(ENDPOINT_ENV))?;
        let api_key = std::env::var(API_KEY_ENV).unwrap_or_default();
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut last = String::new();
        let attempts = self.max_attempts.max(1);
        let start = Instant::now();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(8));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut req = ureq::post(&endpoint).timeout(self.timeout);
            if !api_key.is_empty() {
                req = req.set("Authorization", &format!("Bearer {api_key}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    let parsed: serde_json::Value = resp
                        .into_json()
                        .map_err(|e| LlmError::Transport { attempts: attempt + 1, last: e.to_string() })?;
                    return Ok(parse_chat_response(&parsed, start.elapsed()));
                }
                // Rate limits and server errors are transient; everything
                // else fails fast.
                Err(ureq::Error::Status(code, _)) if code == 429 || (500..600).contains(&code) => {
                    last = format!("status {code}");
                }
                Err(ureq::Error::Transport(t)) => last = t.to_string(),
                Err(e) => {
                    return Err(LlmError::Transport { attempts: attempt + 1, last: e.to_string() })
                }
            }
        }
        Err(LlmError::Transport { attempts, last })
    }
}

fn parse_chat_response(v: &serde_json::Value, elapsed: Duration) -> CompletionResult {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"].as_str().unwrap_or_default().to_string();
    let finish_reason = match choice["finish_reason"].as_str() {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Error,
    };
    CompletionResult {
        text,
        finish_reason,
        usage: Usage {
            prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        },
        latency_ms: elapsed.as_secs_f64() * 1e3,
        cache_hit: false,
    }
}

/// Atomic write-then-rename, so concurrent recorders never corrupt fixtures.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Writes a fixture for a request without a network call. Used by fixture
/// generators and tests that stand in for a provider.
pub fn store_synthetic_fixture(
    fixture_dir: &Path,
    request: &CompletionRequest,
    response_text: &str,
) -> Result<String, LlmError> {
    request.validate()?;
    let key = request.key();
    let fixture = Fixture {
        layout_version: FIXTURE_LAYOUT_VERSION,
        request: request.clone(),
        response_text: response_text.to_string(),
        finish_reason: FinishReason::Stop,
        usage: Usage {
            prompt_tokens: request.messages.iter().map(|m| m.content.len() as u64 / 4).sum(),
            completion_tokens: response_text.len() as u64 / 4,
        },
    };
    let body =
        serde_json::to_vec_pretty(&fixture).map_err(|e| LlmError::FixtureStore(e.to_string()))?;
    write_atomic(&fixture_dir.join(format!("{key}.json")), &body)
        .map_err(|e| LlmError::FixtureStore(e.to_string()))?;
    Ok(key)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_requests: u64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub cache_hits: u64,
}

pub fn cost_report(log: &[CompletionResult]) -> CostReport {
    let mut report = CostReport::default();
    for r in log {
        report.total_requests += 1;
        report.total_prompt_tokens += r.usage.prompt_tokens;
        report.total_completion_tokens += r.usage.completion_tokens;
        if r.cache_hit {
            report.cache_hits += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(content: &str) -> CompletionRequest {
        CompletionRequest {
            model_id: "test-model".to_string(),
            messages: vec![
                Message { role: Role::System, content: "You are a labeler.".to_string() },
                Message { role: Role::User, content: content.to_string() },
            ],
            temperature: 0.0,
            max_tokens: 256,
        }
    }

    #[test]
    fn request_keys_stable_and_distinct() {
        let r = request("is this relevant?");
        assert_eq!(r.key(), request("is this relevant?").key());
        assert_ne!(r.key(), request("is that relevant?").key());
        let mut hotter = request("is this relevant?");
        hotter.temperature = 0.7;
        assert_ne!(r.key(), hotter.key());
    }

    #[test]
    fn replay_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let client = LlmClient::new(ClientMode::Replay, dir.path());
        let req = request("hello");
        let err = client.complete(&req).unwrap_err();
        assert!(matches!(err, LlmError::FixtureMissing(k) if k == req.key()));

        store_synthetic_fixture(dir.path(), &req, "Answer: Yes").unwrap();
        let result = client.complete(&req).unwrap();
        assert_eq!(result.text, "Answer: Yes");
        assert!(result.cache_hit);
    }

    #[test]
    fn record_reuses_existing_fixture_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("ping");
        store_synthetic_fixture(dir.path(), &req, "pong").unwrap();
        // No endpoint env set: a live call would fail, so success proves the
        // stored fixture short-circuited it.
        let client = LlmClient::new(ClientMode::Record, dir.path());
        let result = client.complete(&req).unwrap();
        assert_eq!(result.text, "pong");
    }

    #[test]
    fn request_validation() {
        let mut r = request("x");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request("x");
        r.messages[1].role = Role::Assistant;
        assert!(r.validate().is_err());
        let mut r = request("x");
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn cost_report_sums() {
        assert_eq!(cost_report(&[]), CostReport::default());
        let entry = |hit| CompletionResult {
            text: String::new(),
            finish_reason: FinishReason::Stop,
            usage: Usage { prompt_tokens: 100, completion_tokens: 50 },
            latency_ms: 1.0,
            cache_hit: hit,
        };
        let report = cost_report(&[entry(false), entry(true)]);
        assert_eq!(report.total_requests, 2);
        assert_eq!(report.total_prompt_tokens, 200);
        assert_eq!(report.total_completion_tokens, 100);
        assert_eq!(report.cache_hits, 1);
    }
}
