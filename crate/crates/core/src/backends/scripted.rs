use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use super::{estimate_tokens, BackendError, ChatRequest, ChatResponse, ModelBackend, Role, TokenCount};

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Text { text: String, tokens: Option<TokenCount> },
    Fault(BackendError),
}

impl Reply {
    pub fn text(t: impl Into<String>) -> Self {
        Reply::Text {
            text: t.into(),
            tokens: None,
        }
    }

    pub fn with_tokens(t: impl Into<String>, prompt: u64, completion: u64) -> Self {
        Reply::Text {
            text: t.into(),
            tokens: Some(TokenCount::new(prompt, completion)),
        }
    }
}

/// Computes a reply from the request and the per-role turn number.
pub type Responder = Arc<dyn Fn(&ChatRequest, usize) -> Option<Reply> + Send + Sync>;

/// Deterministic backend. For each request of role `r` at per-role turn `n`,
/// replies come from the first source that has one: the `(r, n)` turn map,
/// the `r` sequence at position `n`, the responders registered for `r` (in
/// order), the default for `r`. Otherwise the call fails with
/// `ScriptExhausted`. Every request is captured for inspection.
#[derive(Default)]
pub struct ScriptedBackend {
    turns: BTreeMap<(Role, usize), Reply>,
    sequences: BTreeMap<Role, Vec<Reply>>,
    responders: Vec<(Role, Responder)>,
    defaults: BTreeMap<Role, Reply>,
    fixed_tokens: Option<TokenCount>,
    counters: Mutex<BTreeMap<Role, usize>>,
    captured: Mutex<Vec<ChatRequest>>,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("turns", &self.turns.len())
            .field("sequences", &self.sequences.keys().collect::<Vec<_>>())
            .field("responders", &self.responders.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn turn(mut self, role: Role, n: usize, reply: Reply) -> Self {
        self.turns.insert((role, n), reply);
        self
    }

    pub fn sequence(mut self, role: Role, replies: impl IntoIterator<Item = Reply>) -> Self {
        self.sequences.entry(role).or_default().extend(replies);
        self
    }

    pub fn texts<S: Into<String>>(self, role: Role, texts: impl IntoIterator<Item = S>) -> Self {
        self.sequence(role, texts.into_iter().map(Reply::text))
    }

    pub fn respond<F>(mut self, role: Role, f: F) -> Self
    where
        F: Fn(&ChatRequest, usize) -> Option<Reply> + Send + Sync + 'static,
    {
        self.responders.push((role, Arc::new(f)));
        self
    }

    pub fn responder(mut self, role: Role, f: Responder) -> Self {
        self.responders.push((role, f));
        self
    }

    pub fn default_reply(mut self, role: Role, reply: Reply) -> Self {
        self.defaults.insert(role, reply);
        self
    }

    /// Token counts reported for replies that do not carry their own.
    pub fn fixed_tokens(mut self, prompt: u64, completion: u64) -> Self {
        self.fixed_tokens = Some(TokenCount::new(prompt, completion));
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.captured.lock().expect("capture lock").clone()
    }

    pub fn requests_for(&self, role: Role) -> Vec<ChatRequest> {
        self.requests().into_iter().filter(|r| r.role == role).collect()
    }

    pub fn calls(&self, role: Role) -> usize {
        self.counters.lock().expect("counter lock").get(&role).copied().unwrap_or(0)
    }

    fn lookup(&self, req: &ChatRequest, turn: usize) -> Option<Reply> {
        if let Some(r) = self.turns.get(&(req.role, turn)) {
            return Some(r.clone());
        }
        if let Some(r) = self.sequences.get(&req.role).and_then(|s| s.get(turn)) {
            return Some(r.clone());
        }
        for (role, f) in &self.responders {
            if *role == req.role {
                if let Some(r) = f(req, turn) {
                    return Some(r);
                }
            }
        }
        self.defaults.get(&req.role).cloned()
    }
}

impl ModelBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let turn = {
            let mut c = self.counters.lock().expect("counter lock");
            let n = c.entry(req.role).or_insert(0);
            *n += 1;
            *n - 1
        };
        self.captured.lock().expect("capture lock").push(req.clone());
        match self.lookup(req, turn) {
            None => Err(BackendError::ScriptExhausted { role: req.role, turn }),
            Some(Reply::Fault(e)) => Err(e),
            Some(Reply::Text { text, tokens }) => {
                let usage = tokens.or(self.fixed_tokens).unwrap_or_else(|| TokenCount {
                    prompt: estimate_tokens(&req.text()),
                    completion: estimate_tokens(&text),
                    estimated: true,
                });
                Ok(ChatResponse { text, usage })
            }
        }
    }
}
