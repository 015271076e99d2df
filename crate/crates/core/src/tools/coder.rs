use super::{ToolKind, ToolRecord, ToolResult, ToolTurn};
use crate::actions::extract_code_blocks;
use crate::backends::{Backends, ChatRequest, Command, CommandLang, EnvError, Environment, Message, Metered, Part, Role};
use crate::prompts;

/// Bytes of command output fed back per turn.
pub const OUTPUT_LIMIT: usize = 8 * 1024;

#[derive(Debug, Clone)]
pub struct CoderConfig {
    pub budget: usize,
    pub platform_text: String,
    pub session: String,
    pub temperature: f64,
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig {
            budget: 20,
            platform_text: "The machine runs Ubuntu with python3 and bash available.".into(),
            session: "coder".into(),
            temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodeOutcome {
    Done { synopsis: String, verify_instructions: String },
    Fail { reason: String },
    BudgetExhausted { partial_log: String },
}

impl CodeOutcome {
    fn to_result(&self) -> ToolResult {
        match self {
            CodeOutcome::Done {
                synopsis,
                verify_instructions,
            } => ToolResult::CodeDone {
                synopsis: synopsis.clone(),
                verification: verify_instructions.clone(),
            },
            CodeOutcome::Fail { reason } => ToolResult::CodeFail { reason: reason.clone() },
            CodeOutcome::BudgetExhausted { partial_log } => ToolResult::CodeBudgetExhausted {
                partial_log: partial_log.clone(),
            },
        }
    }
}

fn floor_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Keeps the first and last `limit / 2` bytes of long output.
pub fn truncate_output(s: &str, limit: usize) -> String {
    if s.len() <= limit {
        return s.to_string();
    }
    let head = floor_boundary(s, limit / 2);
    let tail = ceil_boundary(s, s.len() - limit / 2);
    format!(
        "{}\n[... {} bytes omitted ...]\n{}",
        &s[..head],
        tail - head,
        &s[tail..]
    )
}

enum Answer {
    Run(Command),
    Done,
    Fail,
}

/// First executable or terminal block, plus how many were ignored.
fn parse_answer(text: &str) -> Option<(Answer, usize)> {
    let mut found: Vec<Answer> = extract_code_blocks(text)
        .into_iter()
        .filter_map(|b| {
            let body = b.body.trim();
            match b.lang.to_ascii_lowercase().as_str() {
                "python" | "python3" | "py" => Some(Answer::Run(Command::python(b.body.clone()))),
                "bash" | "sh" | "shell" => Some(Answer::Run(Command::bash(b.body.clone()))),
                _ if body == "DONE" => Some(Answer::Done),
                _ if body == "FAIL" => Some(Answer::Fail),
                _ => None,
            }
        })
        .collect();
    if found.is_empty() {
        return None;
    }
    let extra = found.len() - 1;
    Some((found.swap_remove(0), extra))
}

fn section(text: &str, label: &str, next: &str) -> Option<String> {
    let lower = text.to_ascii_lowercase();
    let start = lower.find(&label.to_ascii_lowercase())? + label.len();
    let end = lower[start..].find(&next.to_ascii_lowercase()).map_or(text.len(), |i| start + i);
    let s = text[start..end].trim().to_string();
    (!s.is_empty()).then_some(s)
}

fn reasoning(text: &str) -> String {
    let before = text.split("```").next().unwrap_or("").trim();
    let before = before.trim_start_matches("(Thought)").trim();
    before.split("(Answer)").next().unwrap_or("").trim().to_string()
}

/// Delegated code loop over the environment's command channel.
pub fn code_task(
    subtask: &str,
    env: &mut dyn Environment,
    backends: &Backends,
    cfg: &CoderConfig,
) -> Metered<(CodeOutcome, ToolRecord)> {
    let mut out = Metered::<()>::default();
    let mut turns: Vec<ToolTurn> = Vec::new();
    let mut log = String::new();
    let finish = |outcome: CodeOutcome, turns: Vec<ToolTurn>, out: Metered| {
        let record = ToolRecord {
            tool: ToolKind::Coder,
            request: subtask.to_string(),
            turns,
            result: outcome.to_result(),
        };
        out.with((outcome, record))
    };
    if !env.capabilities().command_channel {
        return finish(
            CodeOutcome::Fail {
                reason: "environment has no command channel".into(),
            },
            turns,
            out,
        );
    }
    let system = prompts::fill(
        prompts::CODER,
        &[("budget", &cfg.budget.to_string()), ("platform_text", &cfg.platform_text)],
    );
    let mut messages = vec![
        Message::system(system),
        Message::user(vec![Part::text(format!("Task: {subtask}"))]),
    ];
    for turn in 0..cfg.budget {
        let req = ChatRequest::new(Role::Coder, cfg.session.clone(), cfg.temperature, messages.clone());
        out.note_request(&req);
        let resp = match backends.chat(&req) {
            Ok(r) => r,
            Err(e) => {
                return finish(
                    CodeOutcome::Fail {
                        reason: format!("coder backend error: {e}"),
                    },
                    turns,
                    out,
                )
            }
        };
        out.charge(Role::Coder, resp.usage);
        messages.push(Message::assistant(resp.text.clone()));
        let mut rec = ToolTurn {
            index: turn,
            raw_output: resp.text.clone(),
            action: None,
            handle: None,
            feedback: None,
            rejected: None,
        };
        let Some((answer, extra)) = parse_answer(&resp.text) else {
            let fb = "No python, bash, DONE or FAIL block found. Reply with exactly one.".to_string();
            rec.rejected = Some(fb.clone());
            messages.push(Message::user(vec![Part::text(fb)]));
            turns.push(rec);
            continue;
        };
        if extra > 0 {
            let w = format!("coder turn {turn}: {extra} extra block(s) ignored");
            tracing::warn!("{w}");
            out.warnings.push(w);
        }
        match answer {
            Answer::Done => {
                rec.action = Some("DONE".into());
                turns.push(rec);
                let text = prompts::fill(
                    prompts::CODER_SUMMARY,
                    &[("task", subtask), ("log", &truncate_output(&log, OUTPUT_LIMIT * 2))],
                );
                let req = ChatRequest::new(
                    Role::Coder,
                    format!("{}/summary", cfg.session),
                    cfg.temperature,
                    vec![Message::user(vec![Part::text(text)])],
                );
                out.note_request(&req);
                let resp = match backends.chat(&req) {
                    Ok(r) => r,
                    Err(e) => {
                        return finish(
                            CodeOutcome::Fail {
                                reason: format!("coder summary failed: {e}"),
                            },
                            turns,
                            out,
                        )
                    }
                };
                out.charge(Role::Coder, resp.usage);
                let synopsis = section(&resp.text, "Synopsis:", "Verification:");
                let verify = section(&resp.text, "Verification:", "\u{0}");
                let (synopsis, verify_instructions) = match (synopsis, verify) {
                    (Some(s), Some(v)) => (s, v),
                    (s, v) => {
                        out.warnings.push("coder summary missing a labelled section".into());
                        let whole = resp.text.trim().to_string();
                        (s.unwrap_or_else(|| whole.clone()), v.unwrap_or(whole))
                    }
                };
                return finish(
                    CodeOutcome::Done {
                        synopsis,
                        verify_instructions,
                    },
                    turns,
                    out,
                );
            }
            Answer::Fail => {
                rec.action = Some("FAIL".into());
                turns.push(rec);
                let r = reasoning(&resp.text);
                let reason = if r.is_empty() { "coder reported FAIL".to_string() } else { r };
                return finish(CodeOutcome::Fail { reason }, turns, out);
            }
            Answer::Run(cmd) => {
                rec.action = Some(format!("{}: {}", cmd.lang.as_str(), cmd.code));
                rec.handle = Some(env.handle_id());
                let feedback = match env.command(&cmd) {
                    Ok(o) => truncate_output(
                        &format!("exit code: {}\nstdout:\n{}\nstderr:\n{}", o.exit_code, o.stdout, o.stderr),
                        OUTPUT_LIMIT,
                    ),
                    Err(e @ (EnvError::ChannelLost(_) | EnvError::Protocol(_) | EnvError::UnsupportedCapability(_))) => {
                        turns.push(rec);
                        return finish(
                            CodeOutcome::Fail {
                                reason: format!("command channel lost: {e}"),
                            },
                            turns,
                            out,
                        );
                    }
                    Err(e) => format!("execution error: {e}"),
                };
                let lang = match cmd.lang {
                    CommandLang::Bash => "bash",
                    CommandLang::Python => "python",
                };
                log.push_str(&format!("--- turn {turn} ({lang})\n{}\n{feedback}\n", cmd.code));
                rec.feedback = Some(feedback.clone());
                messages.push(Message::user(vec![Part::text(feedback)]));
                turns.push(rec);
            }
        }
    }
    finish(
        CodeOutcome::BudgetExhausted {
            partial_log: truncate_output(&log, OUTPUT_LIMIT),
        },
        turns,
        out,
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backends::sim::{Scenario, SimulatedEnvironment};
    use crate::backends::ScriptedBackend;

    fn env() -> SimulatedEnvironment {
        let sc = Scenario::from_toml(
            r#"
name = "files"
initial = "s"
[screen]
width = 64
height = 36
[states.s]
layout = ["0"]
"#,
        )
        .unwrap();
        SimulatedEnvironment::new(sc).unwrap()
    }

    #[test]
    fn truncation_keeps_head_and_tail() {
        let s = "a".repeat(5000) + &"b".repeat(5000);
        let t = truncate_output(&s, OUTPUT_LIMIT);
        assert!(t.starts_with(&"a".repeat(4096)));
        assert!(t.ends_with(&"b".repeat(4096)));
        assert!(t.contains("1808 bytes omitted"));
        assert_eq!(truncate_output("short", OUTPUT_LIMIT), "short");
        let u = "é".repeat(5000);
        assert!(truncate_output(&u, 101).len() < u.len());
    }

    #[test]
    fn ls_then_done() {
        let b = Arc::new(ScriptedBackend::new().texts(
            Role::Coder,
            [
                "(Thought) look\n(Answer)\n```bash\necho hi\n```",
                "(Answer)\n```\nDONE\n```",
                "Synopsis: echoed a greeting.\nVerification: nothing to check in the GUI.",
            ],
        ));
        let mut e = env();
        let r = code_task("greet", &mut e, &Backends::uniform(b), &CoderConfig::default());
        assert_eq!(
            r.value.0,
            CodeOutcome::Done {
                synopsis: "echoed a greeting.".into(),
                verify_instructions: "nothing to check in the GUI.".into()
            }
        );
        assert!(r.value.1.turns[0].feedback.as_deref().unwrap().contains("hi"));
    }

    #[test]
    fn fail_and_budget() {
        let b = Arc::new(
            ScriptedBackend::new().texts(Role::Coder, ["(Thought) The file does not exist.\n(Answer)\n```\nFAIL\n```"]),
        );
        let r = code_task("edit", &mut env(), &Backends::uniform(b), &CoderConfig::default());
        assert_eq!(
            r.value.0,
            CodeOutcome::Fail {
                reason: "The file does not exist.".into()
            }
        );
        let b = Arc::new(ScriptedBackend::new().default_reply(
            Role::Coder,
            crate::backends::Reply::text("```bash\necho again\n```\n```python\nprint(1)\n```"),
        ));
        let cfg = CoderConfig {
            budget: 10,
            ..Default::default()
        };
        let r = code_task("loop", &mut env(), &Backends::uniform(b.clone()), &cfg);
        assert!(matches!(r.value.0, CodeOutcome::BudgetExhausted { .. }));
        assert_eq!(b.calls(Role::Coder), 10);
        assert_eq!(r.warnings.len(), 10);
    }
}
