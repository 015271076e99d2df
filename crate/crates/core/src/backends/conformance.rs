//! Environment-adapter conformance suite. Any [`Environment`], in-process or
//! behind the wire, should pass every applicable check.

use std::fmt;

use super::{Command, EnvError, Environment, Primitive};
use crate::actions::{Action, Button, GroundedAction, Point};
use crate::vision::hamming;

#[derive(Debug, Clone)]
pub struct ConformanceFixture {
    pub task_id: String,
    pub highlight_from: Point,
    pub highlight_to: Point,
}

impl Default for ConformanceFixture {
    fn default() -> Self {
        ConformanceFixture {
            task_id: "conformance".into(),
            highlight_from: Point::new(10, 10),
            highlight_to: Point::new(40, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub handle: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn record(&mut self, name: &'static str, r: Result<(), String>) {
        let (passed, detail) = match r {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult { name, passed, detail });
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            if c.detail.is_empty() {
                writeln!(f, "{tag} {}", c.name)?;
            } else {
                writeln!(f, "{tag} {}: {}", c.name, c.detail)?;
            }
        }
        Ok(())
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn expect_unsupported<T: fmt::Debug>(r: Result<T, EnvError>) -> Result<(), String> {
    match r {
        Err(EnvError::UnsupportedCapability(_)) => Ok(()),
        other => Err(format!("expected UnsupportedCapability, got {other:?}")),
    }
}

pub fn run_conformance(env: &mut dyn Environment, fx: &ConformanceFixture) -> ConformanceReport {
    let mut rep = ConformanceReport {
        handle: env.handle_id(),
        ..Default::default()
    };
    let caps = env.capabilities();
    let screen = env.screen();
    rep.record(
        "handshake",
        ensure(!rep.handle.is_empty() && screen.width > 0 && screen.height > 0, || {
            format!("handle {:?}, screen {}x{}", rep.handle, screen.width, screen.height)
        }),
    );

    let first = env.reset(&fx.task_id);
    rep.record(
        "reset",
        match &first {
            Ok(o) => ensure(o.dimensions() == (screen.width, screen.height), || {
                format!("reset image {:?} != screen {}x{}", o.dimensions(), screen.width, screen.height)
            }),
            Err(e) => Err(e.to_string()),
        },
    );

    let idem = (|| -> Result<(), String> {
        let a = env.observe().map_err(|e| e.to_string())?;
        let b = env.observe().map_err(|e| e.to_string())?;
        let ha = a.phash(None).map_err(|e| e.to_string())?;
        let hb = b.phash(None).map_err(|e| e.to_string())?;
        ensure(hamming(ha, hb) <= 1, || format!("observe hashes differ by {}", hamming(ha, hb)))?;
        if let Ok(f) = &first {
            let hf = f.phash(None).map_err(|e| e.to_string())?;
            ensure(hamming(ha, hf) <= 1, || "observe differs from reset image".to_string())?;
        }
        Ok(())
    })();
    rep.record("observe_idempotent", idem);

    if caps.gui_primitives {
        let hl = GroundedAction {
            action: Action::HighlightTextSpan {
                start_phrase: "start".into(),
                end_phrase: "end".into(),
                button: Button::Left,
            },
            points: vec![fx.highlight_from, fx.highlight_to],
        };
        let r = env.execute(&hl).map_err(|e| e.to_string()).and_then(|o| {
            ensure(o.dimensions() == (screen.width, screen.height), || "execute image size".into())?;
            let want = vec![
                Primitive::Move {
                    x: fx.highlight_from.x,
                    y: fx.highlight_from.y,
                },
                Primitive::Down { button: Button::Left },
                Primitive::Move {
                    x: fx.highlight_to.x,
                    y: fx.highlight_to.y,
                },
                Primitive::Up { button: Button::Left },
            ];
            let got = env.last_primitives();
            ensure(got.as_ref() == Some(&want), || format!("primitives {got:?}"))
        });
        rep.record("highlight_primitives", r);

        let r = env
            .execute(&GroundedAction::ungrounded(Action::hotkey(["ctrl", "c"])))
            .map_err(|e| e.to_string())
            .and_then(|_| {
                let k = |s: &str| s.to_string();
                let want = vec![
                    Primitive::KeyDown { key: k("ctrl") },
                    Primitive::KeyDown { key: k("c") },
                    Primitive::KeyUp { key: k("c") },
                    Primitive::KeyUp { key: k("ctrl") },
                ];
                let got = env.last_primitives();
                ensure(got.as_ref() == Some(&want), || format!("primitives {got:?}"))
            });
        rep.record("hotkey_primitives", r);

        let r = match env.execute(&GroundedAction::ungrounded(Action::Done)) {
            Err(EnvError::NotDispatchable(_)) => Ok(()),
            other => Err(format!("expected NotDispatchable, got {:?}", other.map(|_| ()))),
        };
        rep.record("terminal_not_dispatched", r);
    } else {
        rep.record(
            "gui_capability_enforced",
            expect_unsupported(env.execute(&GroundedAction::ungrounded(Action::hotkey(["ctrl", "c"])))),
        );
    }

    if caps.command_channel {
        let r = env.command(&Command::bash("echo hi")).map_err(|e| e.to_string()).and_then(|o| {
            ensure(o.stdout.trim() == "hi" && o.exit_code == 0, || format!("{o:?}"))
        });
        rep.record("command_echo", r);
    } else {
        rep.record(
            "command_capability_enforced",
            expect_unsupported(env.command(&Command::bash("echo hi"))),
        );
    }

    if caps.ocr {
        let r = env.ocr().map_err(|e| e.to_string()).and_then(|t| {
            t.validate(screen).map_err(|e| e.to_string())?;
            ensure(t.rows.iter().enumerate().all(|(i, r)| r.id == i), || "ids not dense".into())
        });
        rep.record("ocr_table", r);
    } else {
        rep.record("ocr_capability_enforced", expect_unsupported(env.ocr()));
    }
    rep
}
