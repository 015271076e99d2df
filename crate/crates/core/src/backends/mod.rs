//! Model and environment backends.
//!
//! A [`ModelBackend`] answers backend-neutral chat requests; the scripted
//! implementation drives tests and demos, the HTTP one talks to a real
//! inference service. An [`Environment`] executes grounded actions.

mod env;
mod http;
mod scripted;
pub mod conformance;
pub mod sandbox;
pub mod sim;
pub mod sprites;
pub mod wire;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajectory::Observation;

pub use env::{primitives_for, Capabilities, Command, CommandLang, CommandOutput, EnvError, Environment, Primitive, SandboxFactory};
pub use http::{request_from_wire, request_to_wire, response_from_wire, HttpBackend, HttpConfig, Transport, TransportError, UreqTransport};
pub use scripted::{Reply, Responder, ScriptedBackend};

/// Which agent issued a model request. Token accounting is keyed by this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Orchestrator,
    Summarizer,
    Reflector,
    Grounder,
    OcrGrounder,
    Searcher,
    Coder,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Orchestrator,
        Role::Summarizer,
        Role::Reflector,
        Role::Grounder,
        Role::OcrGrounder,
        Role::Searcher,
        Role::Coder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Orchestrator => "orchestrator",
            Role::Summarizer => "summarizer",
            Role::Reflector => "reflector",
            Role::Grounder => "grounder",
            Role::OcrGrounder => "ocr_grounder",
            Role::Searcher => "searcher",
            Role::Coder => "coder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCount {
    pub prompt: u64,
    pub completion: u64,
    /// At least one contributing count was estimated from character length.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

impl TokenCount {
    pub fn new(prompt: u64, completion: u64) -> Self {
        TokenCount {
            prompt,
            completion,
            estimated: false,
        }
    }

    pub fn add(&mut self, other: TokenCount) {
        self.prompt += other.prompt;
        self.completion += other.completion;
        self.estimated |= other.estimated;
    }

    pub fn total(&self) -> u64 {
        self.prompt + self.completion
    }
}

/// chars / 4, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePart {
    pub width: u32,
    pub height: u32,
    pub png: Arc<Vec<u8>>,
    pub sha256: String,
}

impl ImagePart {
    pub fn from_observation(obs: &Observation) -> Self {
        let (width, height) = obs.dimensions();
        ImagePart {
            width,
            height,
            png: obs.png(),
            sha256: obs.content_hash().to_string(),
        }
    }

    pub fn from_png(width: u32, height: u32, png: Vec<u8>) -> Self {
        let sha256 = hex::encode(Sha256::digest(&png));
        ImagePart {
            width,
            height,
            png: Arc::new(png),
            sha256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImagePart),
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text(s.into())
    }

    pub fn image(obs: &Observation) -> Self {
        Part::Image(ImagePart::from_observation(obs))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: MessageRole,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Message {
            role: MessageRole::User,
            parts,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::Assistant,
            parts: vec![Part::text(text)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub role: Role,
    pub session: String,
    pub temperature: f64,
    pub messages: Vec<Message>,
}

impl ChatRequest {
    pub fn new(role: Role, session: impl Into<String>, temperature: f64, messages: Vec<Message>) -> Self {
        ChatRequest {
            role,
            session: session.into(),
            temperature,
            messages,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.messages.iter().flat_map(|m| m.parts.iter()).filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    pub fn image_hashes(&self) -> Vec<String> {
        self.images().map(|i| i.sha256.clone()).collect()
    }

    /// All text parts joined with newlines.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    /// Text of the last user message.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .map(|m| {
                m.parts
                    .iter()
                    .filter_map(|p| match p {
                        Part::Text(t) => Some(t.as_str()),
                        Part::Image(_) => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenCount,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("scripted backend has no reply for {role} turn {turn}")]
    ScriptExhausted { role: Role, turn: usize },
    #[error("no backend configured for role {0}")]
    NoBackend(Role),
    #[error("empty response text")]
    EmptyResponse,
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::RateLimited)
    }
}

pub trait ModelBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// One backend per role; unset roles fall back to the default, if any.
#[derive(Clone, Default)]
pub struct Backends {
    default: Option<Arc<dyn ModelBackend>>,
    by_role: BTreeMap<Role, Arc<dyn ModelBackend>>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("default", &self.default.is_some())
            .field("roles", &self.by_role.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Backends {
    pub fn uniform(b: Arc<dyn ModelBackend>) -> Self {
        Backends {
            default: Some(b),
            by_role: BTreeMap::new(),
        }
    }

    pub fn with(mut self, role: Role, b: Arc<dyn ModelBackend>) -> Self {
        self.by_role.insert(role, b);
        self
    }

    pub fn get(&self, role: Role) -> Result<&dyn ModelBackend, BackendError> {
        self.by_role
            .get(&role)
            .or(self.default.as_ref())
            .map(|b| b.as_ref())
            .ok_or(BackendError::NoBackend(role))
    }

    /// Sends `req` to the backend for its role and rejects empty replies.
    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.get(req.role)?.chat(req)?;
        if resp.text.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(resp)
    }
}

/// A value obtained through one or more model calls, with what they cost.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metered<T = ()> {
    pub value: T,
    pub tokens: BTreeMap<Role, TokenCount>,
    pub warnings: Vec<String>,
    /// Image hashes of each request sent, in order.
    pub requests: Vec<Vec<String>>,
}

impl<T> Metered<T> {
    pub fn note_request(&mut self, req: &ChatRequest) {
        self.requests.push(req.image_hashes());
    }

    pub fn charge(&mut self, role: Role, usage: TokenCount) {
        self.tokens.entry(role).or_default().add(usage);
    }

    pub fn with<U>(self, value: U) -> Metered<U> {
        Metered {
            value,
            tokens: self.tokens,
            warnings: self.warnings,
            requests: self.requests,
        }
    }

    /// Folds another call's costs into this one and returns its value.
    pub fn absorb<U>(&mut self, other: Metered<U>) -> U {
        for (r, t) in other.tokens {
            self.charge(r, t);
        }
        self.warnings.extend(other.warnings);
        self.requests.extend(other.requests);
        other.value
    }

    pub fn calls(&self) -> usize {
        self.requests.len()
    }

    pub fn max_images(&self) -> usize {
        self.requests.iter().map(Vec::len).max().unwrap_or(0)
    }
}
