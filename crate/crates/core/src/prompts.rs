//! Prompt templates shipped as assets, and placeholder filling.
//!
//! Placeholders are `{name}`. Only names passed to the fill functions are
//! replaced, so literal braces elsewhere in a template (JSON examples) pass
//! through untouched.

use crate::backends::Part;

pub const ORCHESTRATOR: &str = include_str!("../assets/prompts/orchestrator.txt");
pub const ACTION_API: &str = include_str!("../assets/prompts/action_api.txt");
pub const RMA_SYSTEM: &str = include_str!("../assets/prompts/rma_system.txt");
pub const RMA_USER: &str = include_str!("../assets/prompts/rma_user.txt");
pub const SUMMARIZER_SYSTEM: &str = include_str!("../assets/prompts/summarizer_system.txt");
pub const SUMMARIZER_USER: &str = include_str!("../assets/prompts/summarizer_user.txt");
pub const SEARCHER: &str = include_str!("../assets/prompts/searcher.txt");
pub const CODER: &str = include_str!("../assets/prompts/coder.txt");
pub const CODER_SUMMARY: &str = include_str!("../assets/prompts/coder_summary.txt");
pub const GROUNDER: &str = include_str!("../assets/prompts/grounder.txt");
pub const OCR_GROUNDER: &str = include_str!("../assets/prompts/ocr_grounder.txt");

pub const FORMAT_REMINDER: &str = "Your previous reply could not be used: {error}. Reply again in the required format, \
with exactly one action call inside a fenced code block under (Grounded Action).";

pub const REFLECTION_REMINDER: &str = "Your previous reply could not be used: {error}. Reply again and end with a \
```json block containing the keys reflection, milestone and knowledge.";

pub const SUMMARY_REMINDER: &str = "Your previous reply had no verdict. Reply with the two lines `Summary: ...` and \
`Success: true` or `Success: false`.";

/// Value substituted for a placeholder.
pub enum Slot<'a> {
    Text(&'a str),
    Parts(Vec<Part>),
}

/// Text-only substitution.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match tail.find('}').and_then(|close| {
            let name = &tail[1..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        }) {
            Some((close, v)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Substitution that may splice multimodal parts into the template.
/// Adjacent text is merged; empty text runs are dropped.
pub fn fill_parts(template: &str, vars: Vec<(&str, Slot<'_>)>) -> Vec<Part> {
    let mut parts: Vec<Part> = Vec::new();
    let mut buf = String::new();
    let mut vars: Vec<(&str, Option<Slot<'_>>)> = vars.into_iter().map(|(k, v)| (k, Some(v))).collect();
    let mut rest = template;
    let flush = |buf: &mut String, parts: &mut Vec<Part>| {
        if !buf.trim().is_empty() {
            parts.push(Part::Text(std::mem::take(buf)));
        }
        buf.clear();
    };
    while let Some(open) = rest.find('{') {
        buf.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail
            .find('}')
            .and_then(|close| vars.iter().position(|(k, _)| *k == &tail[1..close]).map(|i| (close, i)));
        match hit {
            Some((close, i)) => {
                match &mut vars[i].1 {
                    Some(Slot::Text(t)) => buf.push_str(t),
                    slot @ Some(Slot::Parts(_)) => {
                        if let Some(Slot::Parts(ps)) = slot.take() {
                            for p in ps {
                                match p {
                                    Part::Text(t) => buf.push_str(&t),
                                    img @ Part::Image(_) => {
                                        flush(&mut buf, &mut parts);
                                        parts.push(img);
                                    }
                                }
                            }
                        }
                    }
                    None => {}
                }
                rest = &tail[close + 1..];
            }
            None => {
                buf.push('{');
                rest = &tail[1..];
            }
        }
    }
    buf.push_str(rest);
    flush(&mut buf, &mut parts);
    parts
}
