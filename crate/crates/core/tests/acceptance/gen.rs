//! Random actions covering every variant and awkward string content.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use cua_kernel::actions::{Action, ActionKind, Button, TextPosition};

const CHARS: &[char] = &[
    'a', 'b', 'z', 'Q', '0', '9', ' ', ' ', '.', ',', '(', ')', '[', ']', '=', '\'', '"', '\\', '\n', '\t', '#',
    '`', 'é', '中', '🙂', '_', '-', '/', ':',
];

pub fn string(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| CHARS[rng.gen_range(0..CHARS.len())]).collect()
}

fn keys(rng: &mut ChaCha8Rng, min: usize) -> Vec<String> {
    const KEYS: &[&str] = &["ctrl", "shift", "alt", "a", "enter", "f5", "super", "tab", "'", "\\"];
    let n = rng.gen_range(min..=3);
    (0..n).map(|_| KEYS[rng.gen_range(0..KEYS.len())].to_string()).collect()
}

fn button(rng: &mut ChaCha8Rng) -> Button {
    [Button::Left, Button::Right, Button::Middle][rng.gen_range(0..3)]
}

/// An action of the given kind with random, field-valid arguments.
pub fn action_of(kind: ActionKind, rng: &mut ChaCha8Rng) -> Action {
    match kind {
        ActionKind::Click => Action::Click {
            desc: string(rng, 24),
            num_clicks: rng.gen_range(1..=4),
            button: button(rng),
            hold_keys: keys(rng, 0),
        },
        ActionKind::Type => Action::Type {
            desc: string(rng, 16),
            text: string(rng, 40),
            overwrite: rng.gen(),
            enter: rng.gen(),
            terminal: rng.gen(),
        },
        ActionKind::Scroll => Action::Scroll {
            desc: string(rng, 16),
            clicks: rng.gen_range(-30..=30),
            shift: rng.gen(),
        },
        ActionKind::DragAndDrop => Action::DragAndDrop {
            start_desc: string(rng, 16),
            end_desc: string(rng, 16),
            hold_keys: keys(rng, 0),
        },
        ActionKind::HighlightTextSpan => Action::HighlightTextSpan {
            start_phrase: string(rng, 16),
            end_phrase: string(rng, 16),
            button: button(rng),
        },
        ActionKind::LocateCursor => Action::LocateCursor {
            phrase: string(rng, 16),
            pos: [TextPosition::Start, TextPosition::End][rng.gen_range(0..2)],
            text: rng.gen_bool(0.5).then(|| string(rng, 16)),
        },
        ActionKind::Hotkey => Action::Hotkey { keys: keys(rng, 1) },
        ActionKind::HoldAndPress => Action::HoldAndPress {
            hold_keys: keys(rng, 0),
            press_keys: keys(rng, 1),
        },
        ActionKind::Open => Action::Open {
            app_or_filename: string(rng, 20),
        },
        ActionKind::CallSearchAgent => Action::CallSearchAgent { query: string(rng, 40) },
        ActionKind::CallCodeAgent => Action::CallCodeAgent { task: string(rng, 40) },
        ActionKind::Wait => Action::Wait {
            seconds: match rng.gen_range(0..3) {
                0 => f64::from(rng.gen_range(0..100)),
                1 => f64::from(rng.gen_range(0..100_000)) / 1000.0,
                _ => rng.gen_range(0.0..1e6),
            },
        },
        ActionKind::Done => Action::Done,
        ActionKind::Fail => Action::Fail,
    }
}

pub fn action(rng: &mut ChaCha8Rng) -> Action {
    let kind = ActionKind::ALL[rng.gen_range(0..ActionKind::ALL.len())];
    action_of(kind, rng)
}
