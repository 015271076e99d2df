use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{Action, ActionKind, Button, GroundedAction, Point, ScreenGeometry};
use crate::tools::OcrTable;
use crate::trajectory::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub gui_primitives: bool,
    pub command_channel: bool,
    pub search_sandbox: bool,
    #[serde(default)]
    pub ocr: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandLang {
    Bash,
    Python,
}

impl CommandLang {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandLang::Bash => "bash",
            CommandLang::Python => "python",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub lang: CommandLang,
    pub code: String,
}

impl Command {
    pub fn bash(code: impl Into<String>) -> Self {
        Command {
            lang: CommandLang::Bash,
            code: code.into(),
        }
    }

    pub fn python(code: impl Into<String>) -> Self {
        Command {
            lang: CommandLang::Python,
            code: code.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommandOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("environment lacks capability {0}")]
    UnsupportedCapability(String),
    #[error("primitive failed: {0}")]
    PrimitiveFailure(String),
    #[error("{0} is not dispatched to the environment")]
    NotDispatchable(ActionKind),
    #[error("{0} needs resolved coordinates")]
    MissingCoordinates(ActionKind),
    #[error("action rejected by the environment: {0}")]
    Rejected(String),
    #[error("unknown task {0}")]
    NoSuchTask(String),
    #[error("command channel lost: {0}")]
    ChannelLost(String),
    #[error("wire protocol error: {0}")]
    Protocol(String),
}

/// Low-level input events an adapter performs for one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Primitive {
    Move { x: i32, y: i32 },
    Down { button: Button },
    Up { button: Button },
    Click { button: Button, count: u32 },
    KeyDown { key: String },
    KeyUp { key: String },
    KeyPress { key: String },
    TypeText { text: String },
    Scroll { clicks: i32, shift: bool },
    Sleep { seconds: f64 },
    Open { target: String },
}

fn key_down(keys: &[String]) -> impl Iterator<Item = Primitive> + '_ {
    keys.iter().map(|k| Primitive::KeyDown { key: k.clone() })
}

fn key_up(keys: &[String]) -> impl Iterator<Item = Primitive> + '_ {
    keys.iter().rev().map(|k| Primitive::KeyUp { key: k.clone() })
}

fn mv(p: Point) -> Primitive {
    Primitive::Move { x: p.x, y: p.y }
}

/// The input-primitive sequence for a grounded action.
pub fn primitives_for(ga: &GroundedAction) -> Result<Vec<Primitive>, EnvError> {
    let kind = ga.action.kind();
    if !kind.is_env_dispatched() {
        return Err(EnvError::NotDispatchable(kind));
    }
    if ga.points.len() < kind.point_count() {
        return Err(EnvError::MissingCoordinates(kind));
    }
    let p = |i: usize| ga.points[i];
    let mut out = Vec::new();
    match &ga.action {
        Action::Click {
            num_clicks,
            button,
            hold_keys,
            ..
        } => {
            out.extend(key_down(hold_keys));
            out.push(mv(p(0)));
            out.push(Primitive::Click {
                button: *button,
                count: *num_clicks,
            });
            out.extend(key_up(hold_keys));
        }
        Action::Type {
            text,
            overwrite,
            enter,
            terminal,
            ..
        } => {
            out.push(mv(p(0)));
            out.push(Primitive::Click {
                button: Button::Left,
                count: 1,
            });
            if *overwrite {
                let keys: Vec<String> = if *terminal {
                    vec!["ctrl".into(), "u".into()]
                } else {
                    vec!["ctrl".into(), "a".into()]
                };
                out.extend(key_down(&keys));
                out.extend(key_up(&keys));
                if !*terminal {
                    out.push(Primitive::KeyPress {
                        key: "backspace".into(),
                    });
                }
            }
            out.push(Primitive::TypeText { text: text.clone() });
            if *enter {
                out.push(Primitive::KeyPress { key: "enter".into() });
            }
        }
        Action::Scroll { clicks, shift, .. } => {
            out.push(mv(p(0)));
            out.push(Primitive::Scroll {
                clicks: *clicks,
                shift: *shift,
            });
        }
        Action::DragAndDrop { hold_keys, .. } => {
            out.extend(key_down(hold_keys));
            out.push(mv(p(0)));
            out.push(Primitive::Down { button: Button::Left });
            out.push(mv(p(1)));
            out.push(Primitive::Up { button: Button::Left });
            out.extend(key_up(hold_keys));
        }
        Action::HighlightTextSpan { button, .. } => {
            out.push(mv(p(0)));
            out.push(Primitive::Down { button: *button });
            out.push(mv(p(1)));
            out.push(Primitive::Up { button: *button });
        }
        Action::LocateCursor { text, .. } => {
            out.push(mv(p(0)));
            out.push(Primitive::Click {
                button: Button::Left,
                count: 1,
            });
            if let Some(t) = text {
                out.push(Primitive::TypeText { text: t.clone() });
            }
        }
        Action::Hotkey { keys } => {
            out.extend(key_down(keys));
            out.extend(key_up(keys));
        }
        Action::HoldAndPress { hold_keys, press_keys } => {
            out.extend(key_down(hold_keys));
            out.extend(press_keys.iter().map(|k| Primitive::KeyPress { key: k.clone() }));
            out.extend(key_up(hold_keys));
        }
        Action::Open { app_or_filename } => out.push(Primitive::Open {
            target: app_or_filename.clone(),
        }),
        Action::Wait { seconds } => out.push(Primitive::Sleep { seconds: *seconds }),
        Action::CallSearchAgent { .. } | Action::CallCodeAgent { .. } | Action::Done | Action::Fail => {
            unreachable!("filtered by is_env_dispatched")
        }
    }
    Ok(out)
}

/// An executor for grounded actions: a simulated desktop, a search sandbox,
/// or a wire client talking to an out-of-process adapter.
pub trait Environment: Send {
    /// Stable identity used to attribute dispatches in logs.
    fn handle_id(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn screen(&self) -> ScreenGeometry;
    fn reset(&mut self, task_id: &str) -> Result<Observation, EnvError>;
    fn observe(&mut self) -> Result<Observation, EnvError>;
    /// Performs the action's primitive sequence and returns the screenshot
    /// taken afterwards.
    fn execute(&mut self, ga: &GroundedAction) -> Result<Observation, EnvError>;
    fn command(&mut self, cmd: &Command) -> Result<CommandOutput, EnvError>;

    fn ocr(&mut self) -> Result<OcrTable, EnvError> {
        Err(EnvError::UnsupportedCapability("ocr".into()))
    }

    /// Primitive sequence performed by the most recent `execute`, when the
    /// adapter reports it.
    fn last_primitives(&self) -> Option<Vec<Primitive>> {
        None
    }

    /// Current page address, for browser-like environments.
    fn location(&self) -> Option<String> {
        None
    }

    /// Task success check, when the environment has one.
    fn task_success(&self) -> Option<bool> {
        None
    }
}

/// Opens a fresh search sandbox on the results page for a query.
pub trait SandboxFactory: Send + Sync {
    fn open(&self, query: &str) -> Result<Box<dyn Environment>, EnvError>;
}
