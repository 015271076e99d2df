use serde::{Deserialize, Serialize};

use super::{Action, ActionError, Point, ScreenGeometry};

/// Thresholds for the action half of the joint loop predicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    /// Fraction of the screen diagonal within which two resolved points match.
    pub coord_tolerance_fraction: f64,
    /// Minimum normalized Levenshtein similarity for natural-language queries.
    pub levenshtein_min: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            coord_tolerance_fraction: 0.05,
            levenshtein_min: 0.9,
        }
    }
}

/// `1 - distance / max(len)` over chars; two empty strings are identical.
pub fn query_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

fn points_close(pa: &[Point], pb: &[Point], tol: f64) -> bool {
    pa.len() == pb.len() && pa.iter().zip(pb).all(|(p, q)| p.distance(*q) <= tol)
}

/// Semantic similarity between two actions for loop detection.
///
/// Coordinate-dependent variants compare resolved points within
/// `coord_tolerance_fraction * diagonal` plus exact equality of their discrete
/// parameters (target descriptions are free text and are not compared).
/// Delegation queries use normalized Levenshtein similarity; everything else
/// needs exact argument equality.
pub fn action_similarity(
    a: &Action,
    b: &Action,
    geom: &ScreenGeometry,
    resolved_a: Option<&[Point]>,
    resolved_b: Option<&[Point]>,
    cfg: &SimilarityConfig,
) -> Result<bool, ActionError> {
    for (act, pts) in [(a, resolved_a), (b, resolved_b)] {
        let kind = act.kind();
        if kind.is_coordinate_dependent() && pts.is_none_or(|p| p.len() < kind.point_count()) {
            return Err(ActionError::MissingCoordinates(kind));
        }
    }
    if a.kind() != b.kind() {
        return Ok(false);
    }
    let tol = cfg.coord_tolerance_fraction * geom.diagonal();
    let close = || points_close(resolved_a.unwrap_or(&[]), resolved_b.unwrap_or(&[]), tol);

    let same = match (a, b) {
        (
            Action::Click {
                num_clicks: n1,
                button: b1,
                hold_keys: h1,
                ..
            },
            Action::Click {
                num_clicks: n2,
                button: b2,
                hold_keys: h2,
                ..
            },
        ) => n1 == n2 && b1 == b2 && h1 == h2 && close(),
        (
            Action::Type {
                text: t1,
                overwrite: o1,
                enter: e1,
                terminal: r1,
                ..
            },
            Action::Type {
                text: t2,
                overwrite: o2,
                enter: e2,
                terminal: r2,
                ..
            },
        ) => t1 == t2 && o1 == o2 && e1 == e2 && r1 == r2 && close(),
        (Action::Scroll { clicks: c1, shift: s1, .. }, Action::Scroll { clicks: c2, shift: s2, .. }) => {
            c1 == c2 && s1 == s2 && close()
        }
        (Action::DragAndDrop { hold_keys: h1, .. }, Action::DragAndDrop { hold_keys: h2, .. }) => {
            h1 == h2 && close()
        }
        (
            Action::HighlightTextSpan {
                start_phrase: s1,
                end_phrase: e1,
                button: b1,
            },
            Action::HighlightTextSpan {
                start_phrase: s2,
                end_phrase: e2,
                button: b2,
            },
        ) => s1 == s2 && e1 == e2 && b1 == b2 && close(),
        (
            Action::LocateCursor {
                phrase: p1,
                pos: q1,
                text: t1,
            },
            Action::LocateCursor {
                phrase: p2,
                pos: q2,
                text: t2,
            },
        ) => p1 == p2 && q1 == q2 && t1 == t2 && close(),
        (Action::CallSearchAgent { query: q1 }, Action::CallSearchAgent { query: q2 }) => {
            query_similarity(q1, q2) >= cfg.levenshtein_min
        }
        (Action::CallCodeAgent { task: t1 }, Action::CallCodeAgent { task: t2 }) => {
            query_similarity(t1, t2) >= cfg.levenshtein_min
        }
        // Remaining variants carry only discrete arguments.
        (x, y) => x == y,
    };
    Ok(same)
}
