use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::{edge_midpoint, OcrTable};
use crate::actions::{Action, GroundedAction, GroundingRoute, Point, ScreenGeometry, TextPosition};
use crate::backends::{BackendError, Backends, ChatRequest, EnvError, Environment, Message, Metered, Part, Role};
use crate::prompts;
use crate::trajectory::Observation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("empty element description")]
    EmptyDescription,
    #[error("grounder found no match for {0:?}")]
    GroundingRefused(String),
    #[error("grounder reply not understood: {0:?}")]
    Unparseable(String),
    #[error("phrase {0:?} not found in the OCR table")]
    PhraseNotFound(String),
    #[error("grounder picked id {0}, which is not in the OCR table")]
    AmbiguousSelection(i64),
    #[error("OCR unavailable: {0}")]
    Ocr(EnvError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone)]
pub struct GroundingConfig {
    pub session: String,
    pub temperature: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            session: "grounding".into(),
            temperature: 0.0,
        }
    }
}

static POINT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(?\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)?").expect("static regex"));
static ID_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+").expect("static regex"));

/// `(x, y)` or `NOT_FOUND`. Fractional coordinates are rounded.
pub fn parse_point_reply(text: &str) -> Result<Option<Point>, GroundingError> {
    if text.contains("NOT_FOUND") {
        return Ok(None);
    }
    let c = POINT_RE
        .captures(text)
        .ok_or_else(|| GroundingError::Unparseable(text.chars().take(80).collect()))?;
    let num = |i: usize| -> Result<i32, GroundingError> {
        let v: f64 = c[i].parse().map_err(|_| GroundingError::Unparseable(c[0].to_string()))?;
        Ok(v.round().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32)
    };
    Ok(Some(Point::new(num(1)?, num(2)?)))
}

fn screen_of(obs: &Observation) -> ScreenGeometry {
    let (w, h) = obs.dimensions();
    ScreenGeometry { width: w, height: h }
}

/// Description to pixel point on `obs`. Out-of-range replies are clamped.
pub fn ground_general(
    description: &str,
    obs: &Observation,
    backends: &Backends,
    cfg: &GroundingConfig,
) -> Result<Metered<Point>, GroundingError> {
    if description.trim().is_empty() {
        return Err(GroundingError::EmptyDescription);
    }
    let text = prompts::fill(prompts::GROUNDER, &[("description", description)]);
    let req = ChatRequest::new(
        Role::Grounder,
        cfg.session.clone(),
        cfg.temperature,
        vec![Message::user(vec![Part::image(obs), Part::text(text)])],
    );
    let mut out = Metered::<()>::default();
    out.note_request(&req);
    let resp = backends.chat(&req)?;
    out.charge(req.role, resp.usage);
    let p = parse_point_reply(&resp.text)?.ok_or_else(|| GroundingError::GroundingRefused(description.to_string()))?;
    let (q, moved) = screen_of(obs).clamp(p);
    if moved {
        let w = format!("grounded point ({}, {}) clamped to ({}, {})", p.x, p.y, q.x, q.y);
        tracing::warn!("{w}");
        out.warnings.push(w);
    }
    Ok(out.with(q))
}

/// Phrase to the leading or trailing edge midpoint of the OCR row the
/// backend selects.
pub fn ground_ocr(
    obs: &Observation,
    phrase: &str,
    pos: TextPosition,
    table: &OcrTable,
    backends: &Backends,
    cfg: &GroundingConfig,
) -> Result<Metered<Point>, GroundingError> {
    if phrase.trim().is_empty() {
        return Err(GroundingError::EmptyDescription);
    }
    let text = prompts::fill(prompts::OCR_GROUNDER, &[("phrase", phrase), ("table", &table.render())]);
    let req = ChatRequest::new(
        Role::OcrGrounder,
        cfg.session.clone(),
        cfg.temperature,
        vec![Message::user(vec![Part::image(obs), Part::text(text)])],
    );
    let mut out = Metered::<()>::default();
    out.note_request(&req);
    let resp = backends.chat(&req)?;
    out.charge(req.role, resp.usage);
    if resp.text.contains("NOT_FOUND") {
        return Err(GroundingError::PhraseNotFound(phrase.to_string()));
    }
    let m = ID_RE
        .find(&resp.text)
        .ok_or_else(|| GroundingError::Unparseable(resp.text.chars().take(80).collect()))?;
    let id: i64 = m.as_str().parse().map_err(|_| GroundingError::Unparseable(m.as_str().into()))?;
    let row = usize::try_from(id)
        .ok()
        .and_then(|i| table.get(i))
        .ok_or(GroundingError::AmbiguousSelection(id))?;
    let p = edge_midpoint(row.bbox, pos == TextPosition::Start);
    let (q, moved) = screen_of(obs).clamp(p);
    if moved {
        out.warnings.push(format!("OCR edge point ({}, {}) clamped to ({}, {})", p.x, p.y, q.x, q.y));
    }
    Ok(out.with(q))
}

/// Resolves every point the action needs, following its grounding route.
/// The OCR table is fetched from `env` only for OCR-routed actions.
pub fn ground_action(
    action: &Action,
    obs: &Observation,
    env: &mut dyn Environment,
    backends: &Backends,
    cfg: &GroundingConfig,
) -> Result<Metered<GroundedAction>, GroundingError> {
    let mut acc = Metered::<()>::default();
    let mut points = Vec::new();
    match action.kind().grounding() {
        GroundingRoute::None => {}
        GroundingRoute::General => {
            let descs: Vec<&str> = match action {
                Action::Click { desc, .. } | Action::Type { desc, .. } | Action::Scroll { desc, .. } => vec![desc],
                Action::DragAndDrop { start_desc, end_desc, .. } => vec![start_desc, end_desc],
                _ => unreachable!("general route covers these variants"),
            };
            for d in descs {
                points.push(acc.absorb(ground_general(d, obs, backends, cfg)?));
            }
        }
        GroundingRoute::Ocr => {
            let table = env.ocr().map_err(GroundingError::Ocr)?;
            let lookups: Vec<(&str, TextPosition)> = match action {
                Action::HighlightTextSpan {
                    start_phrase,
                    end_phrase,
                    ..
                } => vec![(start_phrase, TextPosition::Start), (end_phrase, TextPosition::End)],
                Action::LocateCursor { phrase, pos, .. } => vec![(phrase, *pos)],
                _ => unreachable!("OCR route covers these variants"),
            };
            for (phrase, pos) in lookups {
                points.push(acc.absorb(ground_ocr(obs, phrase, pos, &table, backends, cfg)?));
            }
        }
    }
    Ok(acc.with(GroundedAction {
        action: action.clone(),
        points,
    }))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use image::RgbImage;

    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::tools::{OcrTable, OcrWord};

    fn obs() -> Observation {
        Observation::new(RgbImage::new(1920, 1080), 0)
    }

    fn backends(role: Role, replies: &[&str]) -> (Arc<ScriptedBackend>, Backends) {
        let b = Arc::new(ScriptedBackend::new().texts(role, replies.iter().copied()));
        (b.clone(), Backends::uniform(b))
    }

    #[test]
    fn general_point_and_clamp() {
        let (_, be) = backends(Role::Grounder, &["(812, 440)", "(-5, 10)"]);
        let cfg = GroundingConfig::default();
        assert_eq!(ground_general("OK button", &obs(), &be, &cfg).unwrap().value, Point::new(812, 440));
        let r = ground_general("edge", &obs(), &be, &cfg).unwrap();
        assert_eq!(r.value, Point::new(0, 10));
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn empty_description_makes_no_call() {
        let (b, be) = backends(Role::Grounder, &["(1, 1)"]);
        assert_eq!(
            ground_general("  ", &obs(), &be, &GroundingConfig::default()).unwrap_err(),
            GroundingError::EmptyDescription
        );
        assert_eq!(b.calls(Role::Grounder), 0);
    }

    #[test]
    fn refusal() {
        let (_, be) = backends(Role::Grounder, &["NOT_FOUND"]);
        assert!(matches!(
            ground_general("ghost", &obs(), &be, &GroundingConfig::default()),
            Err(GroundingError::GroundingRefused(_))
        ));
    }

    fn table() -> OcrTable {
        OcrTable::from_words(
            vec![OcrWord {
                text: "Total".into(),
                bbox: [100, 200, 160, 220],
            }],
            0.1,
        )
    }

    #[test]
    fn ocr_edges_and_errors() {
        let (_, be) = backends(Role::OcrGrounder, &["0", "id 0", "NOT_FOUND", "7"]);
        let cfg = GroundingConfig::default();
        let o = obs();
        assert_eq!(ground_ocr(&o, "Total", TextPosition::End, &table(), &be, &cfg).unwrap().value, Point::new(160, 210));
        assert_eq!(ground_ocr(&o, "Total", TextPosition::Start, &table(), &be, &cfg).unwrap().value, Point::new(100, 210));
        assert!(matches!(
            ground_ocr(&o, "Missing", TextPosition::Start, &table(), &be, &cfg),
            Err(GroundingError::PhraseNotFound(_))
        ));
        assert_eq!(
            ground_ocr(&o, "Total", TextPosition::Start, &table(), &be, &cfg).unwrap_err(),
            GroundingError::AmbiguousSelection(7)
        );
    }

    #[test]
    fn point_reply_forms() {
        assert_eq!(parse_point_reply("(3, 4)").unwrap(), Some(Point::new(3, 4)));
        assert_eq!(parse_point_reply("click at (3.6, 4)").unwrap(), Some(Point::new(4, 4)));
        assert_eq!(parse_point_reply("NOT_FOUND").unwrap(), None);
        assert!(parse_point_reply("somewhere").is_err());
    }
}
