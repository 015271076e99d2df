//! Scripted backend replies loaded from a TOML file (`cua-script/1`).
//!
//! ```toml
//! schema = "cua-script/1"
//! tokens = [1200, 80]
//!
//! [orchestrator]
//! sequence = ["...", { repeat = 3, text = "..." }]
//! default = "..."
//! ```

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::backends::{Reply, Role, ScriptedBackend};

pub const SCRIPT_SCHEMA: &str = "cua-script/1";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Repeat { repeat: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleScript {
    #[serde(default)]
    pub sequence: Vec<ScriptEntry>,
    #[serde(default)]
    pub default: Option<String>,
    /// Prompt and completion tokens reported per reply.
    #[serde(default)]
    pub tokens: Option<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScriptFile {
    pub schema: String,
    #[serde(default)]
    pub tokens: Option<[u64; 2]>,
    #[serde(flatten)]
    pub roles: BTreeMap<String, RoleScript>,
}

fn role_from_name(name: &str) -> Option<Role> {
    Role::ALL.into_iter().find(|r| r.as_str() == name)
}

impl ScriptFile {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let s: ScriptFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if s.schema != SCRIPT_SCHEMA {
            return Err(format!("unsupported script schema {:?}", s.schema));
        }
        for name in s.roles.keys() {
            if role_from_name(name).is_none() {
                return Err(format!("unknown role {name:?}"));
            }
        }
        Ok(s)
    }

    /// A fresh backend; turn counters start at zero.
    pub fn backend(&self) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        if let Some([p, c]) = self.tokens {
            b = b.fixed_tokens(p, c);
        }
        for (name, rs) in &self.roles {
            let role = role_from_name(name).expect("checked on load");
            let reply = |t: &str| match rs.tokens {
                Some([p, c]) => Reply::with_tokens(t, p, c),
                None => Reply::text(t),
            };
            let mut seq = Vec::new();
            for e in &rs.sequence {
                match e {
                    ScriptEntry::Text(t) => seq.push(reply(t)),
                    ScriptEntry::Repeat { repeat, text } => seq.extend((0..*repeat).map(|_| reply(text))),
                }
            }
            b = b.sequence(role, seq);
            if let Some(d) = &rs.default {
                b = b.default_reply(role, reply(d));
            }
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatRequest, ModelBackend};

    #[test]
    fn sequences_repeat_and_defaults() {
        let s = ScriptFile::from_toml(
            r#"
schema = "cua-script/1"
tokens = [10, 2]
[grounder]
sequence = [{ repeat = 2, text = "(1, 1)" }, "(2, 2)"]
default = "(9, 9)"
[coder]
sequence = ["x"]
tokens = [5, 5]
"#,
        )
        .unwrap();
        let b = s.backend();
        let req = ChatRequest::new(Role::Grounder, "s", 0.0, vec![]);
        let texts: Vec<String> = (0..5).map(|_| b.chat(&req).unwrap().text).collect();
        assert_eq!(texts, ["(1, 1)", "(1, 1)", "(2, 2)", "(9, 9)", "(9, 9)"]);
        assert_eq!(b.chat(&req).unwrap().usage.prompt, 10);
        let r = b.chat(&ChatRequest::new(Role::Coder, "s", 0.0, vec![])).unwrap();
        assert_eq!(r.usage.completion, 5);
    }

    #[test]
    fn rejects_unknown_roles_and_schema() {
        assert!(ScriptFile::from_toml("schema = \"cua-script/1\"\n[oracle]\ndefault = \"x\"").is_err());
        assert!(ScriptFile::from_toml("schema = \"other\"").is_err());
    }
}
