use super::{ground_action, GroundingConfig, ToolKind, ToolRecord, ToolResult, ToolTurn};
use crate::actions::{
    action_from_call, extract_code_blocks, format_action, parse_call, ActionKind, ActionSet, CallArg, ParsedCall,
};
use crate::backends::{Backends, ChatRequest, Environment, Message, Metered, Part, Role, SandboxFactory};
use crate::prompts;
use crate::trajectory::{Observation, Tutorial};

pub const BUDGET_EXHAUSTED_HINT: &str = "budget exhausted";

#[derive(Debug, Clone)]
pub struct SearcherConfig {
    pub step_budget: usize,
    /// GUI actions the searcher may send to the sandbox. The note-taking and
    /// terminal calls are always available.
    pub allowed: ActionSet,
    pub os: String,
    pub session: String,
    pub temperature: f64,
}

impl Default for SearcherConfig {
    fn default() -> Self {
        SearcherConfig {
            step_budget: 15,
            allowed: ActionSet::searcher(),
            os: "Ubuntu".into(),
            session: "searcher".into(),
            temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Done { tutorial: Tutorial },
    Fail { hint: String },
}

impl SearchOutcome {
    fn to_result(&self) -> ToolResult {
        match self {
            SearchOutcome::Done { tutorial } => ToolResult::SearchDone {
                tutorial: tutorial.clone(),
            },
            SearchOutcome::Fail { hint } => ToolResult::SearchFail { hint: hint.clone() },
        }
    }
}

fn first_str_arg(call: &ParsedCall) -> Option<String> {
    call.args.iter().find_map(|a: &CallArg| a.value.as_str().map(str::to_string))
}

/// Numbered or bulleted lines become tutorial steps.
fn tutorial_steps(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim();
            let l = l.trim_start_matches(|c: char| c.is_ascii_digit());
            let l = l.strip_prefix('.').or_else(|| l.strip_prefix(')')).unwrap_or(l);
            l.trim_start_matches(['-', '*']).trim().to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

struct Session<'a> {
    query: &'a str,
    main: &'a Observation,
    cfg: &'a SearcherConfig,
    notes: Vec<String>,
    urls: Vec<String>,
    turns: Vec<ToolTurn>,
}

impl Session<'_> {
    fn request(&self, sandbox_obs: &Observation, location: Option<&str>, reprompt: Option<&str>) -> ChatRequest {
        let notes = if self.notes.is_empty() { "(none)".to_string() } else { self.notes.join("\n") };
        let system = prompts::fill(
            prompts::SEARCHER,
            &[("QUERY", self.query), ("CURRENT_OS", &self.cfg.os), ("TUTORIAL_NOTES", &notes)],
        );
        let mut parts = vec![Part::text("Screen of the agent you are helping:"), Part::image(self.main)];
        if !self.turns.is_empty() {
            let mut hist = String::from("Your previous turns:\n");
            for t in &self.turns {
                let what = t.action.as_deref().unwrap_or("(no action)");
                let fb = t.rejected.as_deref().or(t.feedback.as_deref()).unwrap_or("ok");
                hist.push_str(&format!("{}. {what} -> {fb}\n", t.index + 1));
            }
            parts.push(Part::text(hist));
        }
        parts.push(Part::text(format!(
            "Browser now{}:",
            location.map(|l| format!(" at {l}")).unwrap_or_default()
        )));
        parts.push(Part::image(sandbox_obs));
        if let Some(r) = reprompt {
            parts.push(Part::text(r.to_string()));
        }
        ChatRequest::new(
            Role::Searcher,
            self.cfg.session.clone(),
            self.cfg.temperature,
            vec![Message::system(system), Message::user(parts)],
        )
    }

    fn finish(self, outcome: SearchOutcome, mut out: Metered) -> Metered<(SearchOutcome, ToolRecord)> {
        if let SearchOutcome::Fail { hint } = &outcome {
            out.warnings.push(format!("search failed: {hint}"));
        }
        let record = ToolRecord {
            tool: ToolKind::Searcher,
            request: self.query.to_string(),
            turns: self.turns,
            result: outcome.to_result(),
        };
        out.with((outcome, record))
    }
}

/// Runs the bounded search loop in a fresh sandbox opened for `query`.
/// Every failure mode ends in `Fail`; nothing here aborts the caller.
pub fn search(
    query: &str,
    main: &Observation,
    factory: &dyn SandboxFactory,
    backends: &Backends,
    cfg: &SearcherConfig,
) -> Metered<(SearchOutcome, ToolRecord)> {
    let mut s = Session {
        query,
        main,
        cfg,
        notes: Vec::new(),
        urls: Vec::new(),
        turns: Vec::new(),
    };
    let mut out = Metered::<()>::default();
    let mut sandbox: Box<dyn Environment> = match factory.open(query) {
        Ok(b) => b,
        Err(e) => return s.finish(SearchOutcome::Fail { hint: format!("search sandbox unavailable: {e}") }, out),
    };
    let handle = sandbox.handle_id();
    let mut screen = match sandbox.reset(query) {
        Ok(o) => o,
        Err(e) => return s.finish(SearchOutcome::Fail { hint: format!("search sandbox error: {e}") }, out),
    };
    let gcfg = GroundingConfig {
        session: format!("{}/grounding", cfg.session),
        temperature: 0.0,
    };
    let mut reprompt: Option<String> = None;
    for turn in 0..cfg.step_budget {
        let location = sandbox.location();
        let req = s.request(&screen, location.as_deref(), reprompt.as_deref());
        reprompt = None;
        out.note_request(&req);
        let resp = match backends.chat(&req) {
            Ok(r) => r,
            Err(e) => return s.finish(SearchOutcome::Fail { hint: format!("searcher backend error: {e}") }, out),
        };
        out.charge(Role::Searcher, resp.usage);
        let mut rec = ToolTurn {
            index: turn,
            raw_output: resp.text.clone(),
            action: None,
            handle: None,
            feedback: None,
            rejected: None,
        };
        let call = extract_code_blocks(&resp.text)
            .into_iter()
            .find_map(|b| b.body.find("agent.").map(|i| b.body[i..].to_string()))
            .ok_or_else(|| "no agent.<action>(...) call in a code block".to_string())
            .and_then(|src| parse_call(&src).map_err(|e| e.to_string()));
        let call = match call {
            Ok(c) => c,
            Err(e) => {
                rec.rejected = Some(e.clone());
                reprompt = Some(format!("Your reply could not be used: {e}. Reply with one allowed action."));
                s.turns.push(rec);
                continue;
            }
        };
        match call.method.as_str() {
            "save_to_tutorial_notes" => {
                let text = first_str_arg(&call).unwrap_or_default();
                rec.action = Some(format!("agent.save_to_tutorial_notes({text:?})"));
                if text.trim().is_empty() {
                    rec.rejected = Some("empty note".into());
                } else {
                    s.notes.push(text.trim().to_string());
                    if let Some(u) = &location {
                        if !s.urls.contains(u) {
                            s.urls.push(u.clone());
                        }
                    }
                    rec.feedback = Some("note saved".into());
                }
                s.turns.push(rec);
            }
            "done" => {
                let text = first_str_arg(&call).unwrap_or_default();
                rec.action = Some("agent.done(...)".into());
                let mut steps = tutorial_steps(&text);
                if steps.is_empty() {
                    steps = s.notes.iter().flat_map(|n| tutorial_steps(n)).collect();
                }
                if steps.is_empty() {
                    rec.rejected = Some("done with an empty tutorial and no notes".into());
                    reprompt = Some(
                        "done() needs a tutorial. Save what you found with save_to_tutorial_notes first, or call fail(hint)."
                            .into(),
                    );
                    s.turns.push(rec);
                    continue;
                }
                if let Some(u) = location {
                    if !s.urls.contains(&u) && s.notes.is_empty() {
                        s.urls.push(u);
                    }
                }
                s.turns.push(rec);
                let tutorial = Tutorial {
                    query: query.to_string(),
                    steps,
                    source_urls: s.urls.clone(),
                };
                return s.finish(SearchOutcome::Done { tutorial }, out);
            }
            "fail" => {
                let hint = first_str_arg(&call).unwrap_or_else(|| "no relevant tutorial found".into());
                rec.action = Some(format!("agent.fail({hint:?})"));
                s.turns.push(rec);
                return s.finish(SearchOutcome::Fail { hint }, out);
            }
            _ => {
                let action = match action_from_call(&call) {
                    Ok(a) => a,
                    Err(e) => {
                        rec.rejected = Some(e.to_string());
                        reprompt = Some(format!("Your reply could not be used: {e}. Reply with one allowed action."));
                        s.turns.push(rec);
                        continue;
                    }
                };
                rec.action = Some(format_action(&action));
                if let Err(v) = action.validate(&cfg.allowed) {
                    let allowed: Vec<&str> = cfg.allowed.kinds().map(ActionKind::method_name).collect();
                    let msg = format!("{} is not allowed here ({v:?})", action.kind().method_name());
                    reprompt = Some(format!(
                        "{msg}. Use one of: {}, save_to_tutorial_notes.",
                        allowed.join(", ")
                    ));
                    rec.rejected = Some(msg);
                    s.turns.push(rec);
                    continue;
                }
                let ga = match ground_action(&action, &screen, sandbox.as_mut(), backends, &gcfg) {
                    Ok(g) => out.absorb(g),
                    Err(e) => {
                        rec.rejected = Some(format!("grounding failed: {e}"));
                        s.turns.push(rec);
                        continue;
                    }
                };
                match sandbox.execute(&ga) {
                    Ok(o) => {
                        screen = o;
                        rec.handle = Some(handle.clone());
                        rec.feedback = sandbox.location().map(|u| format!("at {u}"));
                        s.turns.push(rec);
                    }
                    Err(e) => {
                        s.turns.push(rec);
                        return s.finish(SearchOutcome::Fail { hint: format!("search sandbox error: {e}") }, out);
                    }
                }
            }
        }
    }
    s.finish(
        SearchOutcome::Fail {
            hint: BUDGET_EXHAUSTED_HINT.into(),
        },
        out,
    )
}
