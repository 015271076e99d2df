//! Scripted desktop: a finite state graph whose states render as tile
//! screenshots and whose transitions fire on matching actions.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::sandbox::{PageGraph, PageGraphFactory};
use super::sprites::{parse_layout, render_tiles};
use super::{primitives_for, Capabilities, Command, CommandLang, CommandOutput, EnvError, Environment, Primitive};
use crate::actions::{Action, ActionKind, GroundedAction, Point, ScreenGeometry};
use crate::tools::{OcrTable, OcrWord};
use crate::trajectory::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.y >= self.y && p.x < self.x + self.w && p.y < self.y + self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2, self.y + self.h / 2)
    }
}

/// Matches an incoming grounded action. Unset fields match anything.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionPattern {
    /// Method name, e.g. `click`.
    pub kind: String,
    /// Region containing the first resolved point.
    #[serde(default)]
    pub region: Option<String>,
    /// Region containing the second resolved point (drag, highlight).
    #[serde(default)]
    pub end_region: Option<String>,
    /// Exact typed text, or app name for `open`.
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub keys: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub on: ActionPattern,
    pub to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unmatched {
    /// Unmatched actions leave the state unchanged.
    #[default]
    Stay,
    /// Unmatched actions fail with `EnvError::Rejected`.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimState {
    pub layout: Vec<String>,
    #[serde(default)]
    pub regions: BTreeMap<String, Rect>,
    #[serde(default)]
    pub ocr: Vec<OcrWord>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    #[serde(default)]
    pub unmatched: Option<Unmatched>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRule {
    #[serde(default)]
    pub lang: Option<CommandLang>,
    /// Regex searched in the command text.
    pub pattern: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub exit_code: i32,
    /// Optional state change (e.g. a file rewritten by a script).
    #[serde(default)]
    pub to: Option<String>,
}

fn default_screen() -> ScreenGeometry {
    ScreenGeometry::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_screen")]
    pub screen: ScreenGeometry,
    pub initial: String,
    pub states: BTreeMap<String, SimState>,
    #[serde(default)]
    pub success_states: Vec<String>,
    #[serde(default)]
    pub unmatched: Unmatched,
    #[serde(default)]
    pub commands: Vec<CommandRule>,
    #[serde(default)]
    pub capabilities: Option<Capabilities>,
    #[serde(default)]
    pub search: Option<PageGraph>,
    #[serde(default = "default_width_threshold")]
    pub ocr_width_threshold: f64,
}

fn default_width_threshold() -> f64 {
    0.1
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let s: Scenario = toml::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.states.contains_key(&self.initial) {
            return Err(format!("initial state {:?} is not defined", self.initial));
        }
        for (name, st) in &self.states {
            parse_layout(&st.layout).map_err(|e| format!("state {name}: {e}"))?;
            for t in &st.transitions {
                if !self.states.contains_key(&t.to) {
                    return Err(format!("state {name}: transition to unknown state {:?}", t.to));
                }
                if ActionKind::from_method(&t.on.kind).is_none() {
                    return Err(format!("state {name}: unknown action kind {:?}", t.on.kind));
                }
                for r in t.on.region.iter().chain(&t.on.end_region) {
                    if !st.regions.contains_key(r) {
                        return Err(format!("state {name}: unknown region {r:?}"));
                    }
                }
            }
        }
        for c in &self.commands {
            Regex::new(&c.pattern).map_err(|e| format!("command pattern {:?}: {e}", c.pattern))?;
            if let Some(to) = &c.to {
                if !self.states.contains_key(to) {
                    return Err(format!("command rule targets unknown state {to:?}"));
                }
            }
        }
        for s in &self.success_states {
            if !self.states.contains_key(s) {
                return Err(format!("unknown success state {s:?}"));
            }
        }
        if let Some(g) = &self.search {
            g.validate()?;
        }
        Ok(())
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities.unwrap_or(Capabilities {
            gui_primitives: true,
            command_channel: true,
            search_sandbox: self.search.is_some(),
            ocr: true,
        })
    }

    pub fn sandbox_factory(&self) -> Option<PageGraphFactory> {
        self.search.clone().map(PageGraphFactory::new)
    }
}

fn pattern_matches(pat: &ActionPattern, st: &SimState, ga: &GroundedAction) -> bool {
    if pat.kind != ga.action.kind().method_name() {
        return false;
    }
    let in_region = |name: &Option<String>, idx: usize| match name {
        None => true,
        Some(r) => match (st.regions.get(r), ga.points.get(idx)) {
            (Some(rect), Some(p)) => rect.contains(*p),
            _ => false,
        },
    };
    if !in_region(&pat.region, 0) || !in_region(&pat.end_region, 1) {
        return false;
    }
    if let Some(t) = &pat.text {
        let actual = match &ga.action {
            Action::Type { text, .. } => Some(text),
            Action::Open { app_or_filename } => Some(app_or_filename),
            Action::LocateCursor { text, .. } => text.as_ref(),
            _ => None,
        };
        if actual != Some(t) {
            return false;
        }
    }
    if let Some(k) = &pat.keys {
        let actual = match &ga.action {
            Action::Hotkey { keys } => Some(keys),
            Action::HoldAndPress { press_keys, .. } => Some(press_keys),
            _ => None,
        };
        if actual != Some(k) {
            return false;
        }
    }
    true
}

pub struct SimulatedEnvironment {
    scenario: Arc<Scenario>,
    handle: String,
    state: String,
    rendered: BTreeMap<String, Arc<RgbImage>>,
    last_primitives: Option<Vec<Primitive>>,
    dispatched: Vec<String>,
}

impl std::fmt::Debug for SimulatedEnvironment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedEnvironment")
            .field("scenario", &self.scenario.name)
            .field("state", &self.state)
            .finish()
    }
}

impl SimulatedEnvironment {
    pub fn new(scenario: Scenario) -> Result<Self, String> {
        scenario.validate()?;
        let handle = format!("sim:{}", scenario.name);
        let state = scenario.initial.clone();
        Ok(SimulatedEnvironment {
            scenario: Arc::new(scenario),
            handle,
            state,
            rendered: BTreeMap::new(),
            last_primitives: None,
            dispatched: Vec::new(),
        })
    }

    pub fn with_handle(mut self, handle: impl Into<String>) -> Self {
        self.handle = handle.into();
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &str {
        &self.state
    }

    /// Canonical text of every action executed since construction.
    pub fn dispatched(&self) -> &[String] {
        &self.dispatched
    }

    fn snapshot(&mut self) -> Observation {
        let sc = self.scenario.clone();
        let img = self
            .rendered
            .entry(self.state.clone())
            .or_insert_with(|| {
                let st = &sc.states[&self.state];
                let grid = parse_layout(&st.layout).expect("validated");
                Arc::new(render_tiles(&grid, sc.screen.width, sc.screen.height))
            })
            .clone();
        Observation::new((*img).clone(), 0)
    }

    fn require(&self, ok: bool, what: &str) -> Result<(), EnvError> {
        if ok {
            Ok(())
        } else {
            Err(EnvError::UnsupportedCapability(what.into()))
        }
    }
}

impl Environment for SimulatedEnvironment {
    fn handle_id(&self) -> String {
        self.handle.clone()
    }

    fn capabilities(&self) -> Capabilities {
        self.scenario.capabilities()
    }

    fn screen(&self) -> ScreenGeometry {
        self.scenario.screen
    }

    fn reset(&mut self, _task_id: &str) -> Result<Observation, EnvError> {
        self.state = self.scenario.initial.clone();
        self.last_primitives = None;
        Ok(self.snapshot())
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        Ok(self.snapshot())
    }

    fn execute(&mut self, ga: &GroundedAction) -> Result<Observation, EnvError> {
        self.require(self.capabilities().gui_primitives, "gui_primitives")?;
        let prims = primitives_for(ga)?;
        let screen = self.scenario.screen;
        if let Some(p) = ga.points.iter().find(|p| !screen.contains(**p)) {
            return Err(EnvError::PrimitiveFailure(format!("point ({}, {}) is off screen", p.x, p.y)));
        }
        let st = &self.scenario.states[&self.state];
        let next = st
            .transitions
            .iter()
            .find(|t| pattern_matches(&t.on, st, ga))
            .map(|t| t.to.clone());
        let policy = st.unmatched.unwrap_or(self.scenario.unmatched);
        match next {
            Some(to) => self.state = to,
            None if policy == Unmatched::Reject => {
                return Err(EnvError::Rejected(format!("{} in state {}", ga.action, self.state)));
            }
            None => {}
        }
        self.dispatched.push(ga.action.to_string());
        self.last_primitives = Some(prims);
        Ok(self.snapshot())
    }

    fn command(&mut self, cmd: &Command) -> Result<CommandOutput, EnvError> {
        self.require(self.capabilities().command_channel, "command_channel")?;
        let rule = self
            .scenario
            .commands
            .iter()
            .find(|r| r.lang.is_none_or(|l| l == cmd.lang) && Regex::new(&r.pattern).expect("validated").is_match(&cmd.code))
            .cloned();
        if let Some(r) = rule {
            if let Some(to) = r.to {
                self.state = to;
            }
            return Ok(CommandOutput {
                stdout: r.stdout,
                stderr: r.stderr,
                exit_code: r.exit_code,
            });
        }
        let code = cmd.code.trim();
        if cmd.lang == CommandLang::Bash {
            if let Some(rest) = code.strip_prefix("echo ") {
                return Ok(CommandOutput {
                    stdout: format!("{}\n", rest.trim_matches(|c| c == '"' || c == '\'')),
                    ..Default::default()
                });
            }
        }
        let name = code.split_whitespace().next().unwrap_or("");
        Ok(CommandOutput {
            stdout: String::new(),
            stderr: format!("{name}: command not found\n"),
            exit_code: 127,
        })
    }

    fn ocr(&mut self) -> Result<OcrTable, EnvError> {
        self.require(self.capabilities().ocr, "ocr")?;
        let st = &self.scenario.states[&self.state];
        Ok(OcrTable::from_words(st.ocr.clone(), self.scenario.ocr_width_threshold))
    }

    fn last_primitives(&self) -> Option<Vec<Primitive>> {
        self.last_primitives.clone()
    }

    fn task_success(&self) -> Option<bool> {
        if self.scenario.success_states.is_empty() {
            None
        } else {
            Some(self.scenario.success_states.contains(&self.state))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAVE: &str = r#"
name = "save"
screen = { width = 320, height = 180 }
initial = "editing"
success_states = ["saved"]

[states.editing]
layout = ["0007", "1111"]
regions = { save = { x = 240, y = 0, w = 80, h = 90 } }
transitions = [{ on = { kind = "click", region = "save" }, to = "saved" }]

[states.saved]
layout = ["0006", "1111"]

[[commands]]
pattern = "^ls"
stdout = "report.txt\n"
"#;

    #[test]
    fn click_in_region_transitions() {
        let mut env = SimulatedEnvironment::new(Scenario::from_toml(SAVE).unwrap()).unwrap();
        let first = env.reset("t").unwrap();
        let miss = GroundedAction {
            action: Action::click("Save"),
            points: vec![Point::new(10, 10)],
        };
        assert!(env.execute(&miss).unwrap().same_pixels(&first));
        assert_eq!(env.task_success(), Some(false));
        let hit = GroundedAction {
            action: Action::click("Save"),
            points: vec![Point::new(260, 40)],
        };
        let after = env.execute(&hit).unwrap();
        assert_eq!(env.state(), "saved");
        assert!(!after.same_pixels(&first));
        assert_eq!(env.task_success(), Some(true));
        assert_eq!(env.dispatched().len(), 2);
    }

    #[test]
    fn commands_and_echo() {
        let mut env = SimulatedEnvironment::new(Scenario::from_toml(SAVE).unwrap()).unwrap();
        assert_eq!(env.command(&Command::bash("echo hi")).unwrap().stdout, "hi\n");
        assert_eq!(env.command(&Command::bash("ls -la")).unwrap().stdout, "report.txt\n");
        assert_eq!(env.command(&Command::bash("frob")).unwrap().exit_code, 127);
    }

    #[test]
    fn reject_policy_and_capabilities() {
        let mut sc = Scenario::from_toml(SAVE).unwrap();
        sc.unmatched = Unmatched::Reject;
        sc.capabilities = Some(Capabilities {
            gui_primitives: true,
            ..Default::default()
        });
        let mut env = SimulatedEnvironment::new(sc.clone()).unwrap();
        env.reset("t").unwrap();
        assert!(matches!(
            env.execute(&GroundedAction::ungrounded(Action::hotkey(["ctrl", "s"]))),
            Err(EnvError::Rejected(_))
        ));
        assert!(matches!(env.command(&Command::bash("ls")), Err(EnvError::UnsupportedCapability(_))));
        sc.capabilities = Some(Capabilities::default());
        let mut env = SimulatedEnvironment::new(sc).unwrap();
        assert!(matches!(
            env.execute(&GroundedAction::ungrounded(Action::hotkey(["ctrl", "s"]))),
            Err(EnvError::UnsupportedCapability(_))
        ));
    }

    #[test]
    fn validation_catches_dangling_refs() {
        let bad = SAVE.replace("to = \"saved\"", "to = \"nowhere\"");
        assert!(Scenario::from_toml(&bad).unwrap_err().contains("nowhere"));
        let bad = SAVE.replace("region = \"save\"", "region = \"nope\"");
        assert!(Scenario::from_toml(&bad).is_err());
    }
}
