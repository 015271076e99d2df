//! HTTP/JSON chat client.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "temperature": 0.1,
//!  "metadata": {"agent_role": "orchestrator", "session": "task-1/run-0"},
//!  "messages": [{"role": "user", "content": [
//!     {"type": "text", "text": "..."},
//!     {"type": "image_url", "image_url": {"url": "data:image/png;base64,..."},
//!      "width": 1920, "height": 1080}]}]}
//! ```
//!
//! Response body: `{"choices": [{"message": {"content": "..."}}],
//! "usage": {"prompt_tokens": n, "completion_tokens": m}}`. `content` may
//! also be a list of text parts. Missing usage is estimated.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use super::{
    estimate_tokens, BackendError, ChatRequest, ChatResponse, ImagePart, Message, MessageRole, ModelBackend, Part,
    Role, TokenCount,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

pub trait Transport: Send + Sync {
    /// POSTs a JSON body; returns status code and response body.
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError>;
}

#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError> {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let mut rb = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            rb = rb.header("Authorization", &format!("Bearer {token}"));
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        };
        let mut resp = rb.send(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok((status, text))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_images: usize,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: None,
            max_images: 8,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    sleep: Sleeper,
    retries: AtomicU64,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("cfg", &self.cfg).finish()
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let api_key = cfg.api_key_env.as_ref().and_then(|k| std::env::var(k).ok());
        Self::with_transport(cfg, api_key, Arc::new(UreqTransport))
    }

    pub fn with_transport(cfg: HttpConfig, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        HttpBackend {
            cfg,
            api_key,
            transport,
            sleep: Arc::new(std::thread::sleep),
            retries: AtomicU64::new(0),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_sleeper(mut self, f: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(f);
        self
    }

    pub fn retries_used(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn session_lock(&self, session: &str) -> Arc<Mutex<()>> {
        self.sessions
            .lock()
            .expect("session map")
            .entry(session.to_string())
            .or_default()
            .clone()
    }

    fn attempt(&self, body: &str, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let (status, text) = self
            .transport
            .post_json(&self.cfg.endpoint, self.api_key.as_deref(), body, self.cfg.timeout)
            .map_err(|e| match e {
                TransportError::Timeout => BackendError::Timeout,
                TransportError::Io(m) => BackendError::Transport(m),
            })?;
        match status {
            200..=299 => response_from_wire(&text, req),
            429 => Err(BackendError::RateLimited),
            408 | 504 => Err(BackendError::Timeout),
            _ => Err(BackendError::Http { status, body: text }),
        }
    }
}

impl ModelBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let n = req.image_count();
        if n > self.cfg.max_images {
            return Err(BackendError::SchemaError(format!(
                "{n} images exceed the backend limit of {}",
                self.cfg.max_images
            )));
        }
        let body = request_to_wire(req, &self.cfg.model).to_string();
        let lock = self.session_lock(&req.session);
        let _guard = lock.lock().expect("session lock");
        let mut retry = 0;
        loop {
            match self.attempt(&body, req) {
                Err(e) if e.is_retryable() && retry < self.cfg.max_retries => {
                    let delay = self.cfg.backoff_base * 2u32.pow(retry);
                    retry += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(error = %e, retry, ?delay, role = %req.role, "retrying model request");
                    (self.sleep)(delay);
                }
                other => return other,
            }
        }
    }
}

fn role_str(r: MessageRole) -> &'static str {
    match r {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
    }
}

pub fn request_to_wire(req: &ChatRequest, model: &str) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:image/png;base64,{}", B64.encode(img.png.as_slice()))},
                        "width": img.width,
                        "height": img.height,
                    }),
                })
                .collect();
            json!({"role": role_str(m.role), "content": content})
        })
        .collect();
    json!({
        "model": model,
        "temperature": req.temperature,
        "metadata": {"agent_role": req.role.as_str(), "session": req.session},
        "messages": messages,
    })
}

fn schema(msg: impl Into<String>) -> BackendError {
    BackendError::SchemaError(msg.into())
}

/// Inverse of [`request_to_wire`]; also returns the model name.
pub fn request_from_wire(v: &Value) -> Result<(ChatRequest, String), BackendError> {
    let model = v["model"].as_str().ok_or_else(|| schema("missing model"))?.to_string();
    let temperature = v["temperature"].as_f64().ok_or_else(|| schema("missing temperature"))?;
    let role = v["metadata"]["agent_role"]
        .as_str()
        .and_then(Role::parse)
        .ok_or_else(|| schema("missing or unknown metadata.agent_role"))?;
    let session = v["metadata"]["session"].as_str().unwrap_or_default().to_string();
    let mut messages = Vec::new();
    for m in v["messages"].as_array().ok_or_else(|| schema("messages must be a list"))? {
        let role = match m["role"].as_str() {
            Some("system") => MessageRole::System,
            Some("user") => MessageRole::User,
            Some("assistant") => MessageRole::Assistant,
            other => return Err(schema(format!("bad message role {other:?}"))),
        };
        let mut parts = Vec::new();
        for p in m["content"].as_array().ok_or_else(|| schema("content must be a list"))? {
            match p["type"].as_str() {
                Some("text") => parts.push(Part::Text(
                    p["text"].as_str().ok_or_else(|| schema("text part without text"))?.into(),
                )),
                Some("image_url") => {
                    let url = p["image_url"]["url"].as_str().ok_or_else(|| schema("image part without url"))?;
                    let b64 = url
                        .strip_prefix("data:image/png;base64,")
                        .ok_or_else(|| schema("image url is not a PNG data url"))?;
                    let png = B64.decode(b64).map_err(|e| schema(format!("bad base64: {e}")))?;
                    let dim = |k: &str| -> Result<u32, BackendError> {
                        p[k].as_u64()
                            .and_then(|x| u32::try_from(x).ok())
                            .ok_or_else(|| schema(format!("image part without {k}")))
                    };
                    parts.push(Part::Image(ImagePart::from_png(dim("width")?, dim("height")?, png)));
                }
                other => return Err(schema(format!("unknown part type {other:?}"))),
            }
        }
        messages.push(Message { role, parts });
    }
    Ok((
        ChatRequest {
            role,
            session,
            temperature,
            messages,
        },
        model,
    ))
}

pub fn response_from_wire(body: &str, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| schema(format!("response is not JSON: {e}")))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .filter_map(|i| i["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(schema("response has no choices[0].message.content")),
    };
    let usage = match (v["usage"]["prompt_tokens"].as_u64(), v["usage"]["completion_tokens"].as_u64()) {
        (Some(p), Some(c)) => TokenCount::new(p, c),
        (p, c) => TokenCount {
            prompt: p.unwrap_or_else(|| estimate_tokens(&req.text())),
            completion: c.unwrap_or_else(|| estimate_tokens(&text)),
            estimated: true,
        },
    };
    Ok(ChatResponse { text, usage })
}
