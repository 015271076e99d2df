//! Reflection-memory agent: per-step summaries with a GUI-success verdict,
//! and trajectory-level reflections in a fixed four-class message protocol.

use std::fmt;
use std::sync::LazyLock;

use image::{Rgb, RgbImage};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::actions::{extract_code_blocks, Point};
use crate::backends::{BackendError, Backends, ChatRequest, Message, Metered, Part, Role};
use crate::loop_detect::LoopMatch;
use crate::prompts::{self, Slot};
use crate::trajectory::{KnowledgeStore, LongTermMemory, Observation, StepSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionState {
    OnTrack,
    Completed,
    Infeasible,
    OffTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    GuiError,
    LackOfTutorial,
    CodeError,
    OtherError,
}

impl ErrorType {
    pub const ALL: [ErrorType; 4] = [
        ErrorType::GuiError,
        ErrorType::LackOfTutorial,
        ErrorType::CodeError,
        ErrorType::OtherError,
    ];

    /// The label used in reflection text.
    pub fn label(self) -> &'static str {
        match self {
            ErrorType::GuiError => "GUI Operation Error",
            ErrorType::LackOfTutorial => "Lack of Tutorial",
            ErrorType::CodeError => "Code Error",
            ErrorType::OtherError => "Other Error",
        }
    }

    fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gui operation error" | "gui error" => Some(ErrorType::GuiError),
            "lack of tutorial" => Some(ErrorType::LackOfTutorial),
            "code error" => Some(ErrorType::CodeError),
            "other error" => Some(ErrorType::OtherError),
            _ => None,
        }
    }
}

pub const ON_TRACK_PREFIX: &str = "You are on track.";
pub const OFF_TRACK_PREFIX: &str = "The trajectory is not going according to plan.";
pub const COMPLETED_PREFIX: &str = "Task completed.";
pub const INFEASIBLE_PREFIX: &str = "Task infeasible.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionMessage {
    pub state: ReflectionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalled_knowledge: Option<String>,
    /// Imperative phrasing found by the future-plan lint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lint: Vec<String>,
}

impl ReflectionMessage {
    pub fn new(state: ReflectionState, error_type: Option<ErrorType>, explanation: impl Into<String>) -> Result<Self, RmaError> {
        let explanation = explanation.into();
        if (state == ReflectionState::OffTrack) != error_type.is_some() {
            return Err(RmaError::InconsistentVerdict(format!(
                "state {state:?} with error type {error_type:?}"
            )));
        }
        if explanation.trim().is_empty() {
            return Err(RmaError::ProtocolParseError("empty explanation".into()));
        }
        Ok(ReflectionMessage {
            state,
            error_type,
            explanation,
            recalled_knowledge: None,
            lint: Vec::new(),
        })
    }

    /// Protocol text as shown to the orchestrator.
    pub fn render(&self) -> String {
        let mut s = match (self.state, self.error_type) {
            (ReflectionState::OffTrack, Some(e)) => {
                format!("{OFF_TRACK_PREFIX} {}: {}", e.label(), self.explanation)
            }
            (ReflectionState::OnTrack, _) => format!("{ON_TRACK_PREFIX} {}", self.explanation),
            (ReflectionState::Completed, _) => format!("{COMPLETED_PREFIX} {}", self.explanation),
            (ReflectionState::Infeasible, _) => format!("{INFEASIBLE_PREFIX} {}", self.explanation),
            (ReflectionState::OffTrack, None) => unreachable!("constructor enforces error type"),
        };
        if let Some(k) = &self.recalled_knowledge {
            s.push_str(&format!("\nRecalled knowledge: {k}"));
        }
        s
    }

    /// Crosstab column name: the state, or the error type when off track.
    pub fn class_name(&self) -> &'static str {
        match (self.state, self.error_type) {
            (ReflectionState::OnTrack, _) => "on_track",
            (ReflectionState::Completed, _) => "completed",
            (ReflectionState::Infeasible, _) => "infeasible",
            (_, Some(ErrorType::GuiError)) => "gui_error",
            (_, Some(ErrorType::LackOfTutorial)) => "lack_of_tutorial",
            (_, Some(ErrorType::CodeError)) => "code_error",
            (_, _) => "other_error",
        }
    }
}

impl fmt::Display for ReflectionMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuxiliarySignals {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gui_failure: Option<bool>,
    #[serde(default, rename = "loop", skip_serializing_if = "Option::is_none")]
    pub loop_match: Option<LoopMatch>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub coder_pending_verification: bool,
}

pub const HINT_GUI_FAILURE: &str = "[AUTO] previous GUI action judged unsuccessful";
pub const HINT_CODER_PENDING: &str = "[AUTO] code agent reported completion; result not yet verified in the GUI";

impl AuxiliarySignals {
    pub fn hints(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.gui_failure == Some(true) {
            out.push(HINT_GUI_FAILURE.to_string());
        }
        if let Some(m) = self.loop_match {
            out.push(loop_hint(&m));
        }
        if self.coder_pending_verification {
            out.push(HINT_CODER_PENDING.to_string());
        }
        out
    }
}

pub fn loop_hint(m: &LoopMatch) -> String {
    format!(
        "[AUTO] loop detected: steps {}..{} ≡ last {} steps",
        m.historical_start,
        m.historical_start + m.length - 1,
        m.length
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmaVerdict {
    pub reflection: ReflectionMessage,
    pub milestone: bool,
    pub knowledge: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RmaError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("step summary has no success verdict")]
    UnparseableVerdict,
    #[error("reflection protocol error: {0}")]
    ProtocolParseError(String),
    #[error("inconsistent verdict: {0}")]
    InconsistentVerdict(String),
    #[error("point ({}, {}) is outside the image", .0.x, .0.y)]
    PointOutOfBounds(Point),
}

pub const CROP_RADIUS: u32 = 400;
pub const MARKER_RADIUS: i64 = 12;

#[derive(Debug, Clone)]
pub struct ZoomCrop {
    pub image: RgbImage,
    pub center: Point,
    pub radius: u32,
    /// Top-left corner of the crop in source coordinates.
    pub origin: Point,
}

/// Crops `[x - r, x + r) x [y - r, y + r)` clamped to the image and marks the
/// action point with a filled red disc.
pub fn zoom_crop(obs: &Observation, point: Point, radius: u32) -> Result<ZoomCrop, RmaError> {
    let (w, h) = obs.dimensions();
    if point.x < 0 || point.y < 0 || point.x as u32 >= w || point.y as u32 >= h {
        return Err(RmaError::PointOutOfBounds(point));
    }
    let r = i64::from(radius);
    let (px, py) = (i64::from(point.x), i64::from(point.y));
    let x0 = (px - r).max(0);
    let y0 = (py - r).max(0);
    let x1 = (px + r).min(i64::from(w));
    let y1 = (py + r).min(i64::from(h));
    let mut image = image::imageops::crop_imm(obs.image(), x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32).to_image();
    let (cx, cy) = (px - x0, py - y0);
    let rr = MARKER_RADIUS * MARKER_RADIUS;
    for y in (cy - MARKER_RADIUS).max(0)..=(cy + MARKER_RADIUS).min(i64::from(image.height()) - 1) {
        for x in (cx - MARKER_RADIUS).max(0)..=(cx + MARKER_RADIUS).min(i64::from(image.width()) - 1) {
            if (x - cx).pow(2) + (y - cy).pow(2) <= rr {
                image.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
            }
        }
    }
    Ok(ZoomCrop {
        image,
        center: point,
        radius,
        origin: Point::new(x0 as i32, y0 as i32),
    })
}

static SUCCESS_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bsuccess\s*[:=]\s*\**\s*(true|false|yes|no)\b").expect("static regex"));
static SUMMARY_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bsummary\s*:\s*").expect("static regex"));

pub fn parse_step_summary(text: &str) -> Result<StepSummary, RmaError> {
    let verdict = SUCCESS_RE.captures(text).ok_or(RmaError::UnparseableVerdict)?;
    let whole = verdict.get(0).expect("group 0");
    let success = matches!(verdict[1].to_ascii_lowercase().as_str(), "true" | "yes");
    let body = match SUMMARY_RE.find(text) {
        Some(m) if m.end() <= whole.start() => &text[m.end()..whole.start()],
        Some(m) => &text[m.end()..],
        None => &text[..whole.start()],
    };
    let summary = body.trim().trim_end_matches([';', ',', '.']).trim().to_string();
    Ok(StepSummary {
        text: if summary.is_empty() { text.trim().to_string() } else { summary },
        success,
        defaulted: false,
    })
}

/// Request settings shared by the RMA calls of one episode.
#[derive(Debug, Clone)]
pub struct RmaConfig {
    pub session: String,
    pub temperature: f64,
    /// Images per reflection request, latest screenshot included.
    pub max_images: usize,
}

impl Default for RmaConfig {
    fn default() -> Self {
        RmaConfig {
            session: "episode".into(),
            temperature: 0.1,
            max_images: 8,
        }
    }
}

/// Step summary for the action that led from `before` to `after`.
pub fn summarize_step(
    prev_output: &str,
    before: &Observation,
    after: &Observation,
    crop: Option<&ZoomCrop>,
    backends: &Backends,
    cfg: &RmaConfig,
) -> Result<Metered<StepSummary>, RmaError> {
    let crop_parts = match crop {
        Some(c) => vec![
            Part::text("Zoomed view of the action point (red dot):\n"),
            Part::image(&Observation::new(c.image.clone(), before.step_index)),
        ],
        None => vec![],
    };
    let user = prompts::fill_parts(
        prompts::SUMMARIZER_USER,
        vec![
            ("previous_output", Slot::Text(prev_output)),
            ("before", Slot::Parts(vec![Part::image(before)])),
            ("crop", Slot::Parts(crop_parts)),
            ("after", Slot::Parts(vec![Part::image(after)])),
        ],
    );
    let mut messages = vec![Message::system(prompts::SUMMARIZER_SYSTEM), Message::user(user)];
    let mut out = Metered::<()>::default();
    for attempt in 0..2 {
        let req = ChatRequest::new(Role::Summarizer, cfg.session.clone(), cfg.temperature, messages.clone());
        out.note_request(&req);
        let resp = backends.chat(&req)?;
        out.charge(req.role, resp.usage);
        match parse_step_summary(&resp.text) {
            Ok(s) => return Ok(out.with(s)),
            Err(_) if attempt == 0 => {
                messages.push(Message::assistant(resp.text));
                messages.push(Message::user(vec![Part::text(prompts::SUMMARY_REMINDER)]));
            }
            Err(_) => {
                out.warnings.push("step summary verdict missing twice; assuming success".into());
                tracing::warn!("step summary verdict missing after retry, defaulting to success");
                return Ok(out.with(StepSummary {
                    text: resp.text.trim().to_string(),
                    success: true,
                    defaulted: true,
                }));
            }
        }
    }
    unreachable!("loop returns on the second attempt")
}

static OFF_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)^\s*the trajectory is not going according to plan\s*[.:]?\s*(.*)$").expect("static regex"));
static ON_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)^\s*you are on track\s*[.:]?\s*(.*)$").expect("static regex"));
static DONE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)^\s*(?:the\s+)?task\s+(?:is\s+|has\s+been\s+)?completed?\s*[.:!]?\s*(.*)$").expect("static regex"));
static INFEASIBLE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)^\s*(?:the\s+)?task\s+(?:is\s+)?infeasible\s*[.:!]?\s*(.*)$").expect("static regex"));
static LABEL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?is)^\s*\[?\s*(GUI Operation Error|GUI Error|Lack of Tutorial|Code Error|Other Error)\s*\]?\s*:\s*(.*)$")
        .expect("static regex")
});
static ANY_LABEL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(GUI Operation Error|Lack of Tutorial|Code Error|Other Error)\s*:").expect("static regex")
});
static PLAN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(you should|you must|you need to|next,? you|the next step is to|try (?:to|clicking|typing|pressing)|i (?:suggest|recommend)|please (?:click|type|open|press|select|scroll)|(?:click|press|type|select) (?:on )?the)\b",
    )
    .expect("static regex")
});

/// Phrases in a reflection that read as instructions for the next action.
pub fn lint_future_plan(text: &str) -> Vec<String> {
    PLAN_RE
        .find_iter(text)
        .map(|m| format!("future-plan phrasing: {:?}", m.as_str()))
        .collect()
}

fn knowledge_field(v: &Value) -> Result<Option<String>, RmaError> {
    Ok(match v {
        Value::Null => None,
        Value::String(s) if s.trim().is_empty() => None,
        Value::String(s) => Some(s.trim().to_string()),
        Value::Array(items) => {
            let parts: Vec<&str> = items.iter().filter_map(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).collect();
            (!parts.is_empty()).then(|| parts.join("\n"))
        }
        other => return Err(RmaError::ProtocolParseError(format!("knowledge must be text, got {other}"))),
    })
}

/// Extracts the fenced JSON answer (the last one, if several) and maps the
/// reflection text onto the protocol classes.
pub fn parse_reflection(text: &str) -> Result<RmaVerdict, RmaError> {
    let block = extract_code_blocks(text)
        .into_iter()
        .rev()
        .find(|b| b.lang.eq_ignore_ascii_case("json"))
        .ok_or_else(|| RmaError::ProtocolParseError("no ```json answer block".into()))?;
    let v: Value = serde_json::from_str(block.body.trim())
        .map_err(|e| RmaError::ProtocolParseError(format!("answer block is not JSON: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| RmaError::ProtocolParseError("answer block is not an object".into()))?;
    let reflection = obj
        .get("reflection")
        .and_then(Value::as_str)
        .ok_or_else(|| RmaError::ProtocolParseError("missing reflection".into()))?
        .trim();
    let milestone = match obj.get("milestone") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("false") => false,
        Some(other) => return Err(RmaError::ProtocolParseError(format!("milestone must be boolean, got {other}"))),
    };
    let knowledge = knowledge_field(obj.get("knowledge").unwrap_or(&Value::Null))?;
    let recalled = knowledge_field(obj.get("recalled_knowledge").unwrap_or(&Value::Null))?;

    let (state, error_type, rest) = if let Some(c) = OFF_RE.captures(reflection) {
        let rest = c.get(1).map_or("", |m| m.as_str());
        let l = LABEL_RE
            .captures(rest)
            .ok_or_else(|| RmaError::InconsistentVerdict("off-track reflection without an error type".into()))?;
        let et = ErrorType::from_label(&l[1]).expect("regex alternatives are labels");
        (ReflectionState::OffTrack, Some(et), l.get(2).map_or("", |m| m.as_str()).to_string())
    } else {
        let (state, rest) = if let Some(c) = ON_RE.captures(reflection) {
            (ReflectionState::OnTrack, c[1].to_string())
        } else if let Some(c) = INFEASIBLE_RE.captures(reflection) {
            (ReflectionState::Infeasible, c[1].to_string())
        } else if let Some(c) = DONE_RE.captures(reflection) {
            (ReflectionState::Completed, c[1].to_string())
        } else {
            return Err(RmaError::ProtocolParseError(format!(
                "reflection matches none of the four cases: {:?}",
                reflection.chars().take(80).collect::<String>()
            )));
        };
        if let Some(m) = ANY_LABEL_RE.find(&rest) {
            return Err(RmaError::InconsistentVerdict(format!(
                "{state:?} reflection carries error type {:?}",
                m.as_str().trim_end_matches(':').trim()
            )));
        }
        (state, None, rest)
    };
    if let Some(et) = obj.get("error_type").filter(|v| !v.is_null()) {
        let named = et.as_str().and_then(ErrorType::from_label);
        if state != ReflectionState::OffTrack || named != error_type {
            return Err(RmaError::InconsistentVerdict(format!("error_type field {et} disagrees with reflection text")));
        }
    }
    let explanation = if rest.trim().is_empty() { reflection.to_string() } else { rest.trim().to_string() };
    let mut msg = ReflectionMessage::new(state, error_type, explanation)?;
    msg.recalled_knowledge = recalled;
    msg.lint = lint_future_plan(reflection);
    Ok(RmaVerdict {
        reflection: msg,
        milestone,
        knowledge,
    })
}

/// Inputs to one reflection call.
#[derive(Debug)]
pub struct ReflectInput<'a> {
    pub instruction: &'a str,
    pub prev_output: &'a str,
    pub latest: &'a Observation,
    pub long_term: &'a LongTermMemory,
    pub signals: &'a AuxiliarySignals,
}

/// Step indices whose screenshots go into the reflection request: the
/// newest `max_images - 1` of the long-term view's screenshots.
pub fn rma_image_steps(long_term: &LongTermMemory, max_images: usize) -> Vec<usize> {
    let all: Vec<usize> = long_term.screenshots().map(|(i, _)| i).collect();
    let keep = max_images.saturating_sub(1).min(all.len());
    all[all.len() - keep..].to_vec()
}

pub fn build_reflection_request(input: &ReflectInput<'_>, knowledge: &KnowledgeStore, cfg: &RmaConfig) -> ChatRequest {
    let keep = rma_image_steps(input.long_term, cfg.max_images);
    let mut history = Vec::new();
    if input.long_term.entries.is_empty() {
        history.push(Part::text("(no steps yet)\n"));
    }
    for e in &input.long_term.entries {
        let flag = match e.success {
            Some(true) => " [ok]",
            Some(false) => " [failed]",
            None => "",
        };
        let tag = if e.milestone { " (milestone)" } else { "" };
        history.push(Part::text(format!("Step {}{tag}{flag}: {}\n", e.index, e.summary)));
        if let Some(o) = e.screenshot.as_ref().filter(|_| keep.contains(&e.index)) {
            history.push(Part::image(o));
            history.push(Part::text("\n"));
        }
    }
    let hints = input.signals.hints();
    let hints = if hints.is_empty() { "(none)".to_string() } else { hints.join("\n") };
    let existing = knowledge.recall();
    let existing = if existing.is_empty() { "(none)".to_string() } else { existing };
    let user = prompts::fill_parts(
        prompts::RMA_USER,
        vec![
            ("user_instruction", Slot::Text(input.instruction)),
            ("history", Slot::Parts(history)),
            ("latest_agent_output", Slot::Text(input.prev_output)),
            ("latest_screenshot", Slot::Parts(vec![Part::image(input.latest)])),
            ("existing_knowledge", Slot::Text(&existing)),
            ("additional_hints", Slot::Text(&hints)),
        ],
    );
    ChatRequest::new(
        Role::Reflector,
        cfg.session.clone(),
        cfg.temperature,
        vec![Message::system(prompts::RMA_SYSTEM), Message::user(user)],
    )
}

/// One reflection round trip with a single format retry. New knowledge is
/// appended to `knowledge` with `origin_step`.
pub fn reflect(
    input: &ReflectInput<'_>,
    knowledge: &mut KnowledgeStore,
    origin_step: usize,
    backends: &Backends,
    cfg: &RmaConfig,
) -> Result<Metered<RmaVerdict>, RmaError> {
    let mut req = build_reflection_request(input, knowledge, cfg);
    let mut out = Metered::<()>::default();
    for attempt in 0..2 {
        out.note_request(&req);
        let resp = backends.chat(&req)?;
        out.charge(req.role, resp.usage);
        match parse_reflection(&resp.text) {
            Ok(v) => {
                if let Some(k) = &v.knowledge {
                    knowledge.add(k, origin_step);
                }
                out.warnings.extend(v.reflection.lint.iter().cloned());
                return Ok(out.with(v));
            }
            Err(e) if attempt == 0 => {
                tracing::debug!(error = %e, "reflection unparseable, retrying once");
                req.messages.push(Message::assistant(resp.text));
                req.messages.push(Message::user(vec![Part::text(prompts::fill(
                    prompts::REFLECTION_REMINDER,
                    &[("error", &e.to_string())],
                ))]));
            }
            Err(e) => {
                return Err(match e {
                    RmaError::InconsistentVerdict(m) => RmaError::InconsistentVerdict(m),
                    other => RmaError::ProtocolParseError(other.to_string()),
                })
            }
        }
    }
    unreachable!("loop returns on the second attempt")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(reflection: &str, milestone: bool) -> String {
        format!(
            "Analysis here.\n```json\n{}\n```",
            serde_json::json!({"reflection": reflection, "milestone": milestone, "knowledge": ""})
        )
    }

    #[test]
    fn four_states_parse() {
        let on = parse_reflection(&answer("You are on track. The file menu is open.", false)).unwrap();
        assert_eq!((on.reflection.state, on.reflection.error_type), (ReflectionState::OnTrack, None));
        assert_eq!(on.reflection.explanation, "The file menu is open.");
        let c = parse_reflection(&answer("Task completed. The document is saved.", true)).unwrap();
        assert_eq!(c.reflection.state, ReflectionState::Completed);
        assert!(c.milestone);
        let i = parse_reflection(&answer("Task infeasible. Version 4 does not exist.", false)).unwrap();
        assert_eq!(i.reflection.state, ReflectionState::Infeasible);
        for et in ErrorType::ALL {
            let t = format!("The trajectory is not going according to plan. {}: something broke.", et.label());
            let v = parse_reflection(&answer(&t, false)).unwrap();
            assert_eq!((v.reflection.state, v.reflection.error_type), (ReflectionState::OffTrack, Some(et)));
            assert_eq!(v.reflection.explanation, "something broke.");
        }
    }

    #[test]
    fn inconsistencies_rejected() {
        assert!(matches!(
            parse_reflection(&answer("The trajectory is not going according to plan. It is stuck.", false)),
            Err(RmaError::InconsistentVerdict(_))
        ));
        assert!(matches!(
            parse_reflection(&answer("You are on track. GUI Operation Error: nothing happened.", false)),
            Err(RmaError::InconsistentVerdict(_))
        ));
        assert!(matches!(
            parse_reflection("You are on track."),
            Err(RmaError::ProtocolParseError(_))
        ));
        assert!(matches!(
            parse_reflection(&answer("Looks fine to me.", false)),
            Err(RmaError::ProtocolParseError(_))
        ));
    }

    #[test]
    fn knowledge_and_recall_fields() {
        let t = "```json\n{\"reflection\": \"You are on track. Form filled.\", \"milestone\": \"true\", \"knowledge\": [\"gate B12\", \"\"], \"recalled_knowledge\": \"flight AZ-204\"}\n```";
        let v = parse_reflection(t).unwrap();
        assert!(v.milestone);
        assert_eq!(v.knowledge.as_deref(), Some("gate B12"));
        assert_eq!(v.reflection.recalled_knowledge.as_deref(), Some("flight AZ-204"));
    }

    #[test]
    fn lint_flags_directives() {
        let v = parse_reflection(&answer("You are on track. You should click the Save button next.", false)).unwrap();
        assert!(!v.reflection.lint.is_empty());
        let v = parse_reflection(&answer("You are on track. The dialog shows the saved path.", false)).unwrap();
        assert!(v.reflection.lint.is_empty());
    }

    #[test]
    fn render_round_trips() {
        for et in ErrorType::ALL {
            let m = ReflectionMessage::new(ReflectionState::OffTrack, Some(et), "x happened").unwrap();
            let back = parse_reflection(&answer(&m.render(), false)).unwrap().reflection;
            assert_eq!(back.error_type, Some(et));
        }
        assert!(ReflectionMessage::new(ReflectionState::OnTrack, Some(ErrorType::CodeError), "x").is_err());
        assert!(ReflectionMessage::new(ReflectionState::OffTrack, None, "x").is_err());
    }

    #[test]
    fn step_summary_formats() {
        let s = parse_step_summary("summary: clicked File menu; success: true").unwrap();
        assert_eq!((s.text.as_str(), s.success), ("clicked File menu", true));
        let s = parse_step_summary("Summary: The dialog did not open.\nSuccess: false").unwrap();
        assert_eq!((s.text.as_str(), s.success), ("The dialog did not open", false));
        assert_eq!(parse_step_summary("The menu opened."), Err(RmaError::UnparseableVerdict));
    }

    #[test]
    fn hints_are_deterministic() {
        let s = AuxiliarySignals {
            gui_failure: Some(true),
            loop_match: Some(LoopMatch {
                historical_start: 2,
                current_start: 8,
                length: 3,
            }),
            coder_pending_verification: false,
        };
        assert_eq!(
            s.hints(),
            vec![HINT_GUI_FAILURE.to_string(), "[AUTO] loop detected: steps 2..4 ≡ last 3 steps".to_string()]
        );
        assert!(AuxiliarySignals::default().hints().is_empty());
    }

    #[test]
    fn crop_geometry() {
        let obs = Observation::new(RgbImage::new(1920, 1080), 0);
        let c = zoom_crop(&obs, Point::new(960, 540), CROP_RADIUS).unwrap();
        assert_eq!(c.image.dimensions(), (800, 800));
        assert_eq!(*c.image.get_pixel(400, 400), Rgb([255, 0, 0]));
        assert_eq!(*c.image.get_pixel(400, 400 + 13), Rgb([0, 0, 0]));
        let c = zoom_crop(&obs, Point::new(10, 10), CROP_RADIUS).unwrap();
        assert_eq!((c.origin, c.image.dimensions()), (Point::new(0, 0), (410, 410)));
        assert_eq!(zoom_crop(&obs, Point::new(1920, 5), 400).unwrap_err(), RmaError::PointOutOfBounds(Point::new(1920, 5)));
    }
}
