//! Action vocabulary shared by every agent and environment.
//!
//! Actions travel as `agent.<method>(...)` call text (see [`grammar`]); that
//! textual form is also what trajectory logs and the environment wire carry.

mod grammar;
mod similarity;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grammar::{extract_code_blocks, format_action, parse_action, parse_action_block, parse_call, CallArg, ParsedCall};
pub(crate) use grammar::action_from_call;
pub use similarity::{action_similarity, query_similarity, SimilarityConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("bad arguments for `{method}`: {detail}")]
    Arity { method: String, detail: String },
    #[error("no fenced action block in response")]
    NoActionBlock,
    #[error("syntax error in action call: {0}")]
    Syntax(String),
    #[error("coordinate-dependent action `{0}` has no resolved point")]
    MissingCoordinates(ActionKind),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Violation {
    #[error("`{0}` is not permitted for this agent")]
    DisallowedVariant(ActionKind),
    #[error("field invariant violated: {0}")]
    FieldInvariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Button {
    #[default]
    Left,
    Right,
    Middle,
}

impl Button {
    pub fn as_str(self) -> &'static str {
        match self {
            Button::Left => "left",
            Button::Right => "right",
            Button::Middle => "middle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Some(Button::Left),
            "right" => Some(Button::Right),
            "middle" => Some(Button::Middle),
            _ => None,
        }
    }
}

/// Anchor side for OCR-grounded cursor placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TextPosition {
    #[default]
    Start,
    End,
}

impl TextPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            TextPosition::Start => "start",
            TextPosition::End => "end",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "start" => Some(TextPosition::Start),
            "end" => Some(TextPosition::End),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Click {
        desc: String,
        num_clicks: u32,
        button: Button,
        hold_keys: Vec<String>,
    },
    Type {
        desc: String,
        text: String,
        overwrite: bool,
        enter: bool,
        terminal: bool,
    },
    Scroll {
        desc: String,
        clicks: i32,
        shift: bool,
    },
    DragAndDrop {
        start_desc: String,
        end_desc: String,
        hold_keys: Vec<String>,
    },
    HighlightTextSpan {
        start_phrase: String,
        end_phrase: String,
        button: Button,
    },
    LocateCursor {
        phrase: String,
        pos: TextPosition,
        text: Option<String>,
    },
    Hotkey {
        keys: Vec<String>,
    },
    HoldAndPress {
        hold_keys: Vec<String>,
        press_keys: Vec<String>,
    },
    Open {
        app_or_filename: String,
    },
    CallSearchAgent {
        query: String,
    },
    CallCodeAgent {
        task: String,
    },
    Wait {
        seconds: f64,
    },
    Done,
    Fail,
}

/// Fieldless mirror of [`Action`]'s variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    Type,
    Scroll,
    DragAndDrop,
    HighlightTextSpan,
    LocateCursor,
    Hotkey,
    HoldAndPress,
    Open,
    CallSearchAgent,
    CallCodeAgent,
    Wait,
    Done,
    Fail,
}

/// How an action's target is resolved to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundingRoute {
    General,
    Ocr,
    None,
}

impl ActionKind {
    pub const ALL: [ActionKind; 14] = [
        ActionKind::Click,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::DragAndDrop,
        ActionKind::HighlightTextSpan,
        ActionKind::LocateCursor,
        ActionKind::Hotkey,
        ActionKind::HoldAndPress,
        ActionKind::Open,
        ActionKind::CallSearchAgent,
        ActionKind::CallCodeAgent,
        ActionKind::Wait,
        ActionKind::Done,
        ActionKind::Fail,
    ];

    pub fn method_name(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::DragAndDrop => "drag_and_drop",
            ActionKind::HighlightTextSpan => "highlight_text_span",
            ActionKind::LocateCursor => "locate_cursor",
            ActionKind::Hotkey => "hotkey",
            ActionKind::HoldAndPress => "hold_and_press",
            ActionKind::Open => "open",
            ActionKind::CallSearchAgent => "call_search_agent",
            ActionKind::CallCodeAgent => "call_code_agent",
            ActionKind::Wait => "wait",
            ActionKind::Done => "done",
            ActionKind::Fail => "fail",
        }
    }

    pub fn from_method(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.method_name() == name)
    }

    pub fn grounding(self) -> GroundingRoute {
        match self {
            ActionKind::Click | ActionKind::Type | ActionKind::Scroll | ActionKind::DragAndDrop => {
                GroundingRoute::General
            }
            ActionKind::HighlightTextSpan | ActionKind::LocateCursor => GroundingRoute::Ocr,
            _ => GroundingRoute::None,
        }
    }

    pub fn is_coordinate_dependent(self) -> bool {
        self.grounding() != GroundingRoute::None
    }

    /// Number of resolved points a grounded action of this kind carries.
    pub fn point_count(self) -> usize {
        match self {
            ActionKind::DragAndDrop | ActionKind::HighlightTextSpan => 2,
            k if k.is_coordinate_dependent() => 1,
            _ => 0,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::Done | ActionKind::Fail)
    }

    /// Actions that go to the GUI environment (as opposed to tool agents or termination).
    pub fn is_env_dispatched(self) -> bool {
        !matches!(
            self,
            ActionKind::Done | ActionKind::Fail | ActionKind::CallSearchAgent | ActionKind::CallCodeAgent
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method_name())
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Type { .. } => ActionKind::Type,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::DragAndDrop { .. } => ActionKind::DragAndDrop,
            Action::HighlightTextSpan { .. } => ActionKind::HighlightTextSpan,
            Action::LocateCursor { .. } => ActionKind::LocateCursor,
            Action::Hotkey { .. } => ActionKind::Hotkey,
            Action::HoldAndPress { .. } => ActionKind::HoldAndPress,
            Action::Open { .. } => ActionKind::Open,
            Action::CallSearchAgent { .. } => ActionKind::CallSearchAgent,
            Action::CallCodeAgent { .. } => ActionKind::CallCodeAgent,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Done => ActionKind::Done,
            Action::Fail => ActionKind::Fail,
        }
    }

    pub fn click(desc: impl Into<String>) -> Self {
        Action::Click {
            desc: desc.into(),
            num_clicks: 1,
            button: Button::Left,
            hold_keys: Vec::new(),
        }
    }

    pub fn hotkey<S: Into<String>>(keys: impl IntoIterator<Item = S>) -> Self {
        Action::Hotkey {
            keys: keys.into_iter().map(Into::into).collect(),
        }
    }

    /// Field-level invariants independent of which agent emitted the action.
    pub fn check_fields(&self) -> Result<(), Violation> {
        let bad = |m: &str| Err(Violation::FieldInvariant(m.to_string()));
        match self {
            Action::Click { num_clicks, .. } if *num_clicks < 1 => bad("click.num_clicks must be >= 1"),
            Action::Wait { seconds } if !(seconds.is_finite() && *seconds >= 0.0) => {
                bad("wait.seconds must be a non-negative number")
            }
            Action::Hotkey { keys } if keys.is_empty() => bad("hotkey.keys must not be empty"),
            Action::HoldAndPress { press_keys, .. } if press_keys.is_empty() => {
                bad("hold_and_press.press_keys must not be empty")
            }
            _ => Ok(()),
        }
    }

    pub fn validate(&self, allowed: &ActionSet) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        if !allowed.contains(self.kind()) {
            violations.push(Violation::DisallowedVariant(self.kind()));
        }
        if let Err(v) = self.check_fields() {
            violations.push(v);
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_action(self))
    }
}

/// A set of permitted action variants for one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActionSet(u16);

impl ActionSet {
    pub fn all() -> Self {
        Self::from_kinds(ActionKind::ALL)
    }

    pub fn from_kinds(kinds: impl IntoIterator<Item = ActionKind>) -> Self {
        let mut bits = 0u16;
        for k in kinds {
            bits |= 1 << k as u16;
        }
        ActionSet(bits)
    }

    /// Navigation core plus hotkeys and the terminal pair. `save_to_tutorial_notes`
    /// is a searcher-only verb and is handled outside this vocabulary.
    pub fn searcher() -> Self {
        Self::from_kinds([
            ActionKind::Click,
            ActionKind::Type,
            ActionKind::Scroll,
            ActionKind::Hotkey,
            ActionKind::Done,
            ActionKind::Fail,
        ])
    }

    pub fn contains(&self, kind: ActionKind) -> bool {
        self.0 & (1 << kind as u16) != 0
    }

    pub fn kinds(&self) -> impl Iterator<Item = ActionKind> + '_ {
        ActionKind::ALL.into_iter().filter(|k| self.contains(*k))
    }
}

pub fn validate(action: &Action, allowed: &ActionSet) -> Result<(), Vec<Violation>> {
    action.validate(allowed)
}

/// Pixel coordinate in screenshot space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        let dx = f64::from(self.x) - f64::from(other.x);
        let dy = f64::from(self.y) - f64::from(other.y);
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenGeometry {
    pub width: u32,
    pub height: u32,
}

impl ScreenGeometry {
    pub fn new(width: u32, height: u32) -> Option<Self> {
        (width > 0 && height > 0).then_some(ScreenGeometry { width, height })
    }

    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as u32) < self.width && (p.y as u32) < self.height
    }

    /// Clamps into the screen; returns the point and whether it moved.
    pub fn clamp(&self, p: Point) -> (Point, bool) {
        let x = p.x.clamp(0, self.width as i32 - 1);
        let y = p.y.clamp(0, self.height as i32 - 1);
        let q = Point::new(x, y);
        (q, q != p)
    }
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        ScreenGeometry {
            width: 1920,
            height: 1080,
        }
    }
}

/// An action plus the pixel points it resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub action: Action,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Point>,
}

impl GroundedAction {
    pub fn ungrounded(action: Action) -> Self {
        GroundedAction {
            action,
            points: Vec::new(),
        }
    }

    /// Checks the point-count rule for dispatch.
    pub fn is_dispatchable(&self) -> bool {
        self.points.len() == self.action.kind().point_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn searcher_set_membership() {
        let set = ActionSet::searcher();
        let scroll = Action::Scroll {
            desc: "page".into(),
            clicks: -3,
            shift: false,
        };
        assert!(validate(&scroll, &set).is_ok());
        let drag = Action::DragAndDrop {
            start_desc: "a".into(),
            end_desc: "b".into(),
            hold_keys: vec![],
        };
        assert_eq!(
            validate(&drag, &set),
            Err(vec![Violation::DisallowedVariant(ActionKind::DragAndDrop)])
        );
    }

    #[test]
    fn zero_clicks_violates_fields_everywhere() {
        let a = Action::Click {
            desc: "x".into(),
            num_clicks: 0,
            button: Button::Left,
            hold_keys: vec![],
        };
        let errs = validate(&a, &ActionSet::all()).unwrap_err();
        assert!(matches!(errs.as_slice(), [Violation::FieldInvariant(_)]));
    }

    #[test]
    fn negative_wait_and_empty_hotkey_rejected() {
        assert!(Action::Wait { seconds: -1.0 }.check_fields().is_err());
        assert!(Action::Hotkey { keys: vec![] }.check_fields().is_err());
        assert!(Action::Wait { seconds: 0.0 }.check_fields().is_ok());
    }

    #[test]
    fn geometry_diagonal() {
        let g = ScreenGeometry::default();
        assert!((g.diagonal() - 2202.9071700822983).abs() < 1e-9);
        assert!(ScreenGeometry::new(0, 10).is_none());
    }

    #[test]
    fn routing_follows_category() {
        use GroundingRoute::*;
        let expect = [
            (ActionKind::Click, General),
            (ActionKind::Type, General),
            (ActionKind::Scroll, General),
            (ActionKind::DragAndDrop, General),
            (ActionKind::HighlightTextSpan, Ocr),
            (ActionKind::LocateCursor, Ocr),
            (ActionKind::Hotkey, None),
            (ActionKind::HoldAndPress, None),
            (ActionKind::Open, None),
            (ActionKind::CallSearchAgent, None),
            (ActionKind::CallCodeAgent, None),
            (ActionKind::Wait, None),
            (ActionKind::Done, None),
            (ActionKind::Fail, None),
        ];
        for (k, r) in expect {
            assert_eq!(k.grounding(), r, "{k}");
        }
    }
}
