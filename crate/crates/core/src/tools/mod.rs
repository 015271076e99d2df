//! Tool agents: the general and OCR grounders, the search-sandbox loop and
//! the code-execution loop.

mod coder;
mod grounding;
mod searcher;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{Point, ScreenGeometry};
use crate::trajectory::Tutorial;

pub use coder::{code_task, truncate_output, CodeOutcome, CoderConfig, OUTPUT_LIMIT};
pub use grounding::{
    ground_action, ground_general, ground_ocr, parse_point_reply, GroundingConfig, GroundingError,
};
pub use searcher::{search, SearchOutcome, SearcherConfig, BUDGET_EXHAUSTED_HINT};

/// A word as reported by an OCR engine, before segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrWord {
    pub text: String,
    /// x1, y1, x2, y2 with x2/y2 exclusive.
    pub bbox: [i32; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcrRow {
    pub text: String,
    pub id: usize,
    pub bbox: [i32; 4],
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OcrTableError {
    #[error("ids are not dense: row {pos} has id {id}")]
    SparseIds { pos: usize, id: usize },
    #[error("row {0} has a box outside the screen")]
    OutOfBounds(usize),
    #[error("row {0} has an empty or inverted box")]
    BadBox(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrTable {
    pub rows: Vec<OcrRow>,
    pub width_threshold: f64,
}

impl OcrTable {
    /// Orders words top-to-bottom then left-to-right, and joins neighbours on
    /// one line whose horizontal gap is at most `width_threshold` times the
    /// box height (the usual OCR-engine merge rule). Ids are dense from 0.
    pub fn from_words(mut words: Vec<OcrWord>, width_threshold: f64) -> Self {
        words.retain(|w| !w.text.trim().is_empty());
        words.sort_by_key(|w| (w.bbox[1], w.bbox[0]));
        let mut merged: Vec<OcrWord> = Vec::with_capacity(words.len());
        for w in words {
            if let Some(prev) = merged.last_mut() {
                let h = f64::from((prev.bbox[3] - prev.bbox[1]).max(w.bbox[3] - w.bbox[1]));
                let same_line = (prev.bbox[1] - w.bbox[1]).abs() * 2 <= (prev.bbox[3] - prev.bbox[1])
                    && (prev.bbox[3] - w.bbox[3]).abs() * 2 <= (prev.bbox[3] - prev.bbox[1]);
                let gap = f64::from(w.bbox[0] - prev.bbox[2]);
                if same_line && gap >= 0.0 && gap <= width_threshold * h {
                    prev.text = format!("{} {}", prev.text, w.text);
                    prev.bbox = [
                        prev.bbox[0],
                        prev.bbox[1].min(w.bbox[1]),
                        w.bbox[2].max(prev.bbox[2]),
                        prev.bbox[3].max(w.bbox[3]),
                    ];
                    continue;
                }
            }
            merged.push(w);
        }
        OcrTable {
            rows: merged
                .into_iter()
                .enumerate()
                .map(|(id, w)| OcrRow {
                    text: w.text,
                    id,
                    bbox: w.bbox,
                })
                .collect(),
            width_threshold,
        }
    }

    pub fn validate(&self, screen: ScreenGeometry) -> Result<(), OcrTableError> {
        for (pos, r) in self.rows.iter().enumerate() {
            if r.id != pos {
                return Err(OcrTableError::SparseIds { pos, id: r.id });
            }
            let [x1, y1, x2, y2] = r.bbox;
            if x1 >= x2 || y1 >= y2 {
                return Err(OcrTableError::BadBox(pos));
            }
            if x1 < 0 || y1 < 0 || x2 as u32 > screen.width || y2 as u32 > screen.height {
                return Err(OcrTableError::OutOfBounds(pos));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&OcrRow> {
        self.rows.get(id).filter(|r| r.id == id)
    }

    /// One `id | text | x1,y1,x2,y2` line per row.
    pub fn render(&self) -> String {
        let mut out = String::from("id | text | bbox\n");
        for r in &self.rows {
            let [x1, y1, x2, y2] = r.bbox;
            out.push_str(&format!("{} | {} | {x1},{y1},{x2},{y2}\n", r.id, r.text));
        }
        out
    }

    /// Rows whose text contains `phrase`, case-insensitively.
    pub fn mentions(&self, phrase: &str) -> bool {
        let p = phrase.to_lowercase();
        self.rows.iter().any(|r| {
            let t = r.text.to_lowercase();
            t.contains(&p) || p.contains(&t)
        })
    }
}

/// Midpoint of a box's leading (`start`) or trailing edge.
pub fn edge_midpoint(bbox: [i32; 4], start: bool) -> Point {
    let y = (bbox[1] + bbox[3]) / 2;
    Point::new(if start { bbox[0] } else { bbox[2] }, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Searcher,
    Coder,
}

/// One inner-loop turn of a tool agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTurn {
    pub index: usize,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    /// Environment the turn dispatched to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ToolResult {
    SearchDone { tutorial: Tutorial },
    SearchFail { hint: String },
    CodeDone { synopsis: String, verification: String },
    CodeFail { reason: String },
    CodeBudgetExhausted { partial_log: String },
}

/// Nested log record for one tool invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub tool: ToolKind,
    pub request: String,
    pub turns: Vec<ToolTurn>,
    pub result: ToolResult,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(text: &str, bbox: [i32; 4]) -> OcrWord {
        OcrWord {
            text: text.into(),
            bbox,
        }
    }

    #[test]
    fn rows_sorted_and_dense() {
        let t = OcrTable::from_words(
            vec![
                w("World", [200, 10, 260, 30]),
                w("Total", [100, 200, 160, 220]),
                w("Hello", [100, 10, 160, 30]),
            ],
            0.1,
        );
        let texts: Vec<_> = t.rows.iter().map(|r| (r.id, r.text.as_str())).collect();
        assert_eq!(texts, vec![(0, "Hello"), (1, "World"), (2, "Total")]);
        t.validate(ScreenGeometry::default()).unwrap();
    }

    #[test]
    fn width_threshold_merges_tight_gaps() {
        let words = vec![w("Re", [100, 10, 120, 30]), w("port", [121, 10, 150, 30])];
        let t = OcrTable::from_words(words.clone(), 0.1);
        assert_eq!(t.rows.len(), 1);
        assert_eq!((t.rows[0].text.as_str(), t.rows[0].bbox), ("Re port", [100, 10, 150, 30]));
        let t = OcrTable::from_words(vec![w("a", [100, 10, 120, 30]), w("b", [123, 10, 150, 30])], 0.1);
        assert_eq!(t.rows.len(), 2);
    }

    #[test]
    fn validation_catches_bad_rows() {
        let mut t = OcrTable::from_words(vec![w("x", [0, 0, 10, 10])], 0.1);
        t.rows[0].bbox = [0, 0, 1930, 10];
        assert_eq!(t.validate(ScreenGeometry::default()), Err(OcrTableError::OutOfBounds(0)));
        t.rows[0].id = 3;
        assert!(matches!(t.validate(ScreenGeometry::default()), Err(OcrTableError::SparseIds { .. })));
    }

    #[test]
    fn edge_midpoints() {
        assert_eq!(edge_midpoint([100, 200, 160, 220], false), Point::new(160, 210));
        assert_eq!(edge_midpoint([100, 200, 160, 220], true), Point::new(100, 210));
    }
}
