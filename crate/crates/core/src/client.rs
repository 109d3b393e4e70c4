//! Blocking chat client for OpenAI-compatible and Ollama-native endpoints.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::prompt::{Part, PromptBundle, Role, DEFAULT_CONTEXT_TOKENS};

pub const DEFAULT_TOKEN_ENV: &str = "PLOTBENCH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFormat {
    #[default]
    OpenAi,
    Ollama,
}

impl WireFormat {
    pub fn path(self) -> &'static str {
        match self {
            WireFormat::OpenAi => "/v1/chat/completions",
            WireFormat::Ollama => "/api/chat",
        }
    }
}

impl std::str::FromStr for WireFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "openai" => Ok(WireFormat::OpenAi),
            "ollama" => Ok(WireFormat::Ollama),
            other => Err(format!("unknown wire format `{other}`; expected openai or ollama")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub wire: WireFormat,
    pub context_window_tokens: usize,
    pub temperature: f64,
    pub request_timeout_s: f64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    /// Environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    pub max_in_flight: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:11434".into(),
            model_name: "mock".into(),
            wire: WireFormat::OpenAi,
            context_window_tokens: DEFAULT_CONTEXT_TOKENS,
            temperature: 0.0,
            request_timeout_s: 600.0,
            max_retries: 2,
            backoff_ms: 500,
            token_env: Some(DEFAULT_TOKEN_ENV.into()),
            max_in_flight: 4,
        }
    }
}

impl EndpointConfig {
    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.wire.path())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub finish_reason: Option<String>,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Timeout,
    Transport,
    HttpStatus,
    MalformedResponse,
    Image,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("reading image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ClientError {
    pub fn kind(&self) -> FailureKind {
        match self {
            ClientError::Timeout => FailureKind::Timeout,
            ClientError::Transport(_) => FailureKind::Transport,
            ClientError::HttpStatus { .. } => FailureKind::HttpStatus,
            ClientError::MalformedResponse(_) => FailureKind::MalformedResponse,
            ClientError::Image { .. } => FailureKind::Image,
        }
    }

    fn transient(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::Transport(_) => true,
            ClientError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub fn image_mime(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("ppm" | "pnm") => "image/x-portable-pixmap",
        _ => "image/png",
    }
}

fn encode_image(path: &Path) -> Result<String, ClientError> {
    let bytes = std::fs::read(path).map_err(|source| ClientError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(B64.encode(bytes))
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// The JSON request body. Identical inputs give identical bytes.
pub fn request_body(cfg: &EndpointConfig, bundle: &PromptBundle, seed: Option<u64>) -> Result<Vec<u8>, ClientError> {
    let mut messages = Vec::with_capacity(bundle.messages.len());
    for m in &bundle.messages {
        let texts: Vec<&str> = m.parts.iter().filter_map(Part::as_text).collect();
        let has_image = m.parts.iter().any(|p| matches!(p, Part::Image { .. }));
        let msg = match cfg.wire {
            WireFormat::OpenAi if has_image => {
                let mut content = Vec::new();
                for p in &m.parts {
                    content.push(match p {
                        Part::Text { text } => json!({"type": "text", "text": text}),
                        Part::Image { path } => json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{}", image_mime(path), encode_image(path)?)}
                        }),
                    });
                }
                json!({"role": role_name(m.role), "content": content})
            }
            WireFormat::OpenAi => json!({"role": role_name(m.role), "content": texts.join("\n\n")}),
            WireFormat::Ollama => {
                let mut msg = Map::new();
                msg.insert("role".into(), role_name(m.role).into());
                msg.insert("content".into(), texts.join("\n\n").into());
                if has_image {
                    let mut images = Vec::new();
                    for p in &m.parts {
                        if let Part::Image { path } = p {
                            images.push(Value::from(encode_image(path)?));
                        }
                    }
                    msg.insert("images".into(), images.into());
                }
                Value::Object(msg)
            }
        };
        messages.push(msg);
    }
    let body = match cfg.wire {
        WireFormat::OpenAi => {
            let mut b = json!({
                "model": cfg.model_name,
                "messages": messages,
                "temperature": cfg.temperature,
                "stream": false,
            });
            if let Some(s) = seed {
                b["seed"] = s.into();
            }
            b
        }
        WireFormat::Ollama => {
            let mut options = json!({"num_ctx": cfg.context_window_tokens, "temperature": cfg.temperature});
            if let Some(s) = seed {
                options["seed"] = s.into();
            }
            json!({"model": cfg.model_name, "messages": messages, "stream": false, "options": options})
        }
    };
    Ok(serde_json::to_vec(&body).expect("JSON values always serialize"))
}

/// Answer text and usage counters of one response body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub finish_reason: Option<String>,
}

pub fn parse_response(wire: WireFormat, body: &str) -> Result<Reply, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
    let missing = |what: &str| ClientError::MalformedResponse(format!("missing {what}"));
    match wire {
        WireFormat::OpenAi => {
            let choice = v.pointer("/choices/0").ok_or_else(|| missing("choices[0]"))?;
            let text = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| missing("choices[0].message.content"))?;
            Ok(Reply {
                text: text.to_string(),
                prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
                completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
                finish_reason: choice.get("finish_reason").and_then(Value::as_str).map(String::from),
            })
        }
        WireFormat::Ollama => {
            let text = v
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| missing("message.content"))?;
            Ok(Reply {
                text: text.to_string(),
                prompt_tokens: v.get("prompt_eval_count").and_then(Value::as_u64),
                completion_tokens: v.get("eval_count").and_then(Value::as_u64),
                finish_reason: v.get("done_reason").and_then(Value::as_str).map(String::from),
            })
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

/// Shareable across threads; at most `max_in_flight` requests run at once.
pub struct Client {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    slots: Slots,
}

impl Client {
    pub fn new(cfg: EndpointConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.request_timeout_s.max(0.001)))
            .build();
        let slots = Slots {
            free: Mutex::new(cfg.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Self { cfg, agent, slots }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn token(&self) -> Option<String> {
        self.cfg
            .token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|t| !t.is_empty())
    }

    fn attempt(&self, url: &str, body: &[u8]) -> Result<String, ClientError> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(t) = self.token() {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        match req.send_bytes(body) {
            Ok(resp) => {
                let mut text = String::new();
                resp.into_reader()
                    .read_to_string(&mut text)
                    .map_err(|e| match e.kind() {
                        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => ClientError::Timeout,
                        _ => ClientError::Transport(e.to_string()),
                    })?;
                Ok(text)
            }
            Err(ureq::Error::Status(status, resp)) => Err(ClientError::HttpStatus {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) if is_timeout(&t) => Err(ClientError::Timeout),
            Err(ureq::Error::Transport(t)) => Err(ClientError::Transport(t.to_string())),
        }
    }

    /// One chat round trip with retries on transient failures.
    pub fn chat(&self, bundle: &PromptBundle, seed: Option<u64>) -> Result<RawResponse, ClientError> {
        if bundle.exceeds_context(self.cfg.context_window_tokens) {
            warn!(
                "{} prompt estimated at {} tokens exceeds the {}-token context",
                bundle.label(),
                bundle.token_estimate,
                self.cfg.context_window_tokens
            );
        }
        let body = request_body(&self.cfg, bundle, seed)?;
        let url = self.cfg.url();
        let _slot = self.slots.acquire();
        let start = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.attempt(&url, &body) {
                Ok(text) => {
                    let reply = parse_response(self.cfg.wire, &text)?;
                    return Ok(RawResponse {
                        text: reply.text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        prompt_tokens: reply.prompt_tokens,
                        completion_tokens: reply.completion_tokens,
                        finish_reason: reply.finish_reason,
                        attempts: attempt,
                    });
                }
                Err(e) if e.transient() && attempt <= self.cfg.max_retries => {
                    let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    debug!("attempt {attempt} failed ({e}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Message;

    fn bundle(image: PathBuf) -> PromptBundle {
        PromptBundle {
            method: 1,
            blind: false,
            messages: vec![
                Message {
                    role: Role::System,
                    parts: vec![Part::text("sys"), Part::text("ref")],
                },
                Message {
                    role: Role::User,
                    parts: vec![Part::Image { path: image }, Part::text("Answer:")],
                },
            ],
            token_estimate: 3,
        }
    }

    #[test]
    fn openai_body_shape() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("t.png");
        std::fs::write(&img, b"\x89PNGfake").unwrap();
        let cfg = EndpointConfig {
            model_name: "m".into(),
            ..Default::default()
        };
        let body: Value = serde_json::from_slice(&request_body(&cfg, &bundle(img), Some(5)).unwrap()).unwrap();
        assert_eq!(body["messages"][0]["content"], "sys\n\nref");
        let url = body["messages"][1]["content"][0]["image_url"]["url"].as_str().unwrap();
        assert_eq!(url, format!("data:image/png;base64,{}", B64.encode(b"\x89PNGfake")));
        assert_eq!(body["messages"][1]["content"][1]["text"], "Answer:");
        assert_eq!(body["seed"], 5);
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn ollama_body_shape() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("t.jpg");
        std::fs::write(&img, b"jpg").unwrap();
        let cfg = EndpointConfig {
            wire: WireFormat::Ollama,
            ..Default::default()
        };
        let body: Value = serde_json::from_slice(&request_body(&cfg, &bundle(img), Some(9)).unwrap()).unwrap();
        assert_eq!(body["messages"][1]["images"][0], B64.encode(b"jpg"));
        assert_eq!(body["messages"][1]["content"], "Answer:");
        assert_eq!(body["options"]["num_ctx"], 32768);
        assert_eq!(body["options"]["seed"], 9);
    }

    #[test]
    fn missing_image_is_reported() {
        let err = request_body(&EndpointConfig::default(), &bundle("/nonexistent/x.png".into()), None).unwrap_err();
        assert_eq!(err.kind(), FailureKind::Image);
    }

    #[test]
    fn response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}],
                       "usage":{"prompt_tokens":10,"completion_tokens":2}}"#;
        let r = parse_response(WireFormat::OpenAi, body).unwrap();
        assert_eq!(
            (
                r.text.as_str(),
                r.prompt_tokens,
                r.completion_tokens,
                r.finish_reason.as_deref()
            ),
            ("hi", Some(10), Some(2), Some("stop"))
        );
        let body = r#"{"message":{"content":"yo"},"done_reason":"length","eval_count":4}"#;
        let r = parse_response(WireFormat::Ollama, body).unwrap();
        assert_eq!(
            (
                r.text.as_str(),
                r.prompt_tokens,
                r.completion_tokens,
                r.finish_reason.as_deref()
            ),
            ("yo", None, Some(4), Some("length"))
        );
        assert!(matches!(
            parse_response(WireFormat::OpenAi, r#"{"choices":[]}"#),
            Err(ClientError::MalformedResponse(_))
        ));
    }

    #[test]
    fn wire_names() {
        assert_eq!("ollama".parse::<WireFormat>(), Ok(WireFormat::Ollama));
        assert!("grpc".parse::<WireFormat>().is_err());
        let cfg = EndpointConfig {
            base_url: "http://h:1/".into(),
            ..Default::default()
        };
        assert_eq!(cfg.url(), "http://h:1/v1/chat/completions");
    }
}
