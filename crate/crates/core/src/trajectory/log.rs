//! Line-delimited trajectory log.
//!
//! One JSON object per line, tagged by `type`: a `header`, one `step` per
//! step, and an `end` record. Screenshots live next to the log as
//! `images/<sha256>.png` and are referenced by hash. Nothing time-dependent
//! is written, so replaying a scripted episode reproduces the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KnowledgeEntry, Observation, Outcome, Phase, StepSummary, Trajectory, Tutorial};
use crate::actions::{format_action, parse_action, Point, ScreenGeometry};
use crate::backends::{Role, TokenCount};
use crate::loop_detect::{LoopConfig, LoopRecord};
use crate::rma::{AuxiliarySignals, ReflectionMessage};
use crate::tools::ToolRecord;

pub const LOG_SCHEMA: &str = "cua-trajectory/1";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Deterministic PNG encoding.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    buf
}

/// Settings the episode ran under, repeated in every log header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    pub k: usize,
    pub max_images: usize,
    pub rma_max_images: usize,
    pub max_steps: usize,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub screen: ScreenGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub task_id: String,
    pub instruction: String,
    pub run_index: usize,
    pub temperature: f64,
    pub env_handle: String,
    pub config: LogConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub image: String,
    pub thought: String,
    pub action: String,
    /// Resolved points; absent when the action was never grounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<StepSummary>,
    pub milestone: bool,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<AuxiliarySignals>,
    pub tokens: BTreeMap<Role, TokenCount>,
    pub context_images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rma_images: Option<Vec<String>>,
    pub tutorials_in_context: usize,
    pub phases: Vec<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndRecord {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    pub steps: usize,
    pub tutorials: Vec<Tutorial>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub token_totals: BTreeMap<Role, TokenCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(LogHeader),
    Step(Box<StepRecord>),
    End(EndRecord),
}

#[derive(Debug, Clone)]
pub struct LoggedEpisode {
    pub path: PathBuf,
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
    pub end: Option<EndRecord>,
}

impl LoggedEpisode {
    pub fn image_dir(&self) -> PathBuf {
        self.path.parent().unwrap_or(Path::new(".")).join("images")
    }

    pub fn image_path(&self, hash: &str) -> PathBuf {
        self.image_dir().join(format!("{hash}.png"))
    }

    pub fn load_image(&self, hash: &str) -> Result<RgbImage, LogError> {
        let p = self.image_path(hash);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map(|i| i.to_rgb8())
            .map_err(|e| LogError::CorruptLog {
                path: p.clone(),
                reason: format!("unreadable image: {e}"),
            })
    }

    /// Step records as loop-detector input, with images loaded from disk.
    /// Each distinct image is decoded once and shared.
    pub fn loop_records(&self) -> Result<Vec<LoopRecord>, LogError> {
        let mut cache: BTreeMap<&str, Observation> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let obs = match cache.get(s.image.as_str()) {
                Some(o) => o.with_index(s.index),
                None => {
                    let o = Observation::new(self.load_image(&s.image)?, s.index);
                    cache.insert(&s.image, o.clone());
                    o
                }
            };
            let action = parse_action(&s.action).map_err(|e| LogError::CorruptLog {
                path: self.path.clone(),
                reason: format!("step {}: {e}", s.index),
            })?;
            out.push(LoopRecord {
                observation: obs,
                action,
                points: s.points.clone(),
            });
        }
        Ok(out)
    }

    pub fn token_sum(&self) -> BTreeMap<Role, TokenCount> {
        let mut out: BTreeMap<Role, TokenCount> = BTreeMap::new();
        for s in &self.steps {
            for (r, t) in &s.tokens {
                out.entry(*r).or_default().add(*t);
            }
        }
        out
    }
}

impl LogHeader {
    pub fn for_trajectory(traj: &Trajectory, config: LogConfig) -> Self {
        LogHeader {
            schema: LOG_SCHEMA.to_string(),
            task_id: traj.task_id.clone(),
            instruction: traj.task_instruction.clone(),
            run_index: traj.run_index,
            temperature: traj.temperature,
            env_handle: traj.env_handle.clone(),
            config,
        }
    }
}

pub fn step_record(s: &super::Step) -> StepRecord {
    StepRecord {
        index: s.index,
        image: s.observation.content_hash().to_string(),
        thought: s.thought.clone(),
        action: format_action(&s.action),
        points: s.grounded.as_ref().map(|g| g.points.clone()),
        summary: s.summary.clone(),
        milestone: s.milestone,
        raw_output: s.raw_output.clone(),
        reflection: s.reflection.clone(),
        reflection_error: s.reflection_error.clone(),
        signals: s.signals.clone(),
        tokens: s.tokens.clone(),
        context_images: s.context_image_refs.clone(),
        rma_images: s.rma_image_refs.clone(),
        tutorials_in_context: s.tutorials_in_context,
        phases: s.phases.clone(),
        tool: s.tool.clone(),
        note: s.note.clone(),
        warnings: s.warnings.clone(),
    }
}

/// Writes `<dir>/<name>.jsonl` and any missing screenshots under
/// `<dir>/images/`. Returns the log path.
pub fn write_log(traj: &Trajectory, config: LogConfig, dir: &Path, name: &str) -> Result<PathBuf, LogError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for s in &traj.steps {
        let p = images.join(format!("{}.png", s.observation.content_hash()));
        if !p.exists() {
            // Parallel episodes may share screenshots; publish by rename.
            let tmp = images.join(format!(
                ".{}.{}.{:?}.tmp",
                s.observation.content_hash(),
                std::process::id(),
                std::thread::current().id()
            ));
            fs::write(&tmp, s.observation.png().as_slice()).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &p).map_err(io_err(&p))?;
        }
    }
    let mut records = vec![LogRecord::Header(LogHeader::for_trajectory(traj, config))];
    records.extend(traj.steps.iter().map(|s| LogRecord::Step(Box::new(step_record(s)))));
    records.push(LogRecord::End(EndRecord {
        outcome: traj.outcome,
        abort_reason: traj.abort_reason.clone(),
        success: traj.success,
        steps: traj.steps.len(),
        tutorials: traj.tutorials.clone(),
        knowledge: traj.knowledge.entries().to_vec(),
        token_totals: traj.token_totals(),
    }));
    let path = dir.join(format!("{name}.jsonl"));
    let mut buf = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut buf, r).expect("log records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&buf).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_log(path: &Path) -> Result<LoggedEpisode, LogError> {
    let corrupt = |reason: String| LogError::CorruptLog {
        path: path.to_path_buf(),
        reason,
    };
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut steps = Vec::new();
    let mut end = None;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
        match rec {
            LogRecord::Header(h) => {
                if header.is_some() || n != 0 {
                    return Err(corrupt(format!("line {}: header out of place", n + 1)));
                }
                if h.schema != LOG_SCHEMA {
                    return Err(corrupt(format!("unsupported schema {:?}", h.schema)));
                }
                header = Some(h);
            }
            LogRecord::Step(s) => {
                if header.is_none() || end.is_some() {
                    return Err(corrupt(format!("line {}: step outside header/end", n + 1)));
                }
                if s.index != steps.len() {
                    return Err(corrupt(format!("line {}: step index {} out of order", n + 1, s.index)));
                }
                steps.push(*s);
            }
            LogRecord::End(e) => {
                if end.is_some() {
                    return Err(corrupt("two end records".into()));
                }
                end = Some(e);
            }
        }
    }
    Ok(LoggedEpisode {
        path: path.to_path_buf(),
        header: header.ok_or_else(|| corrupt("missing header".into()))?,
        steps,
        end,
    })
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;
    use crate::actions::{Action, GroundedAction};
    use crate::trajectory::Step;

    fn config() -> LogConfig {
        LogConfig {
            k: 8,
            max_images: 8,
            rma_max_images: 8,
            max_steps: 10,
            loop_cfg: LoopConfig::default(),
            screen: ScreenGeometry::default(),
        }
    }

    fn traj() -> Trajectory {
        let mut t = Trajectory::new("t1", "save the file", ScreenGeometry::default());
        let o = Observation::new(RgbImage::from_pixel(8, 8, Rgb([9, 9, 9])), 0);
        let mut s = Step::new(0, o.clone(), Action::click("Save"));
        s.grounded = Some(GroundedAction {
            action: Action::click("Save"),
            points: vec![Point::new(3, 4)],
        });
        s.add_tokens(Role::Orchestrator, TokenCount::new(100, 10));
        s.context_image_refs = vec![o.content_hash().to_string()];
        t.append_step(s).unwrap();
        let mut s = Step::new(1, o.with_index(1), Action::Done);
        s.add_tokens(Role::Reflector, TokenCount::new(50, 5));
        t.append_step(s).unwrap();
        t
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = traj();
        let p = write_log(&t, config(), dir.path(), "ep").unwrap();
        let ep = read_log(&p).unwrap();
        assert_eq!(ep.steps.len(), 2);
        assert_eq!(ep.steps[0].action, r#"agent.click("Save", 1, "left")"#);
        assert_eq!(ep.end.as_ref().unwrap().outcome, Outcome::Done);
        assert_eq!(ep.token_sum(), ep.end.as_ref().unwrap().token_totals);
        let recs = ep.loop_records().unwrap();
        assert!(recs[0].observation.same_pixels(&t.steps[0].observation));
        assert_eq!(fs::read_dir(ep.image_dir()).unwrap().count(), 1);
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_log(&traj(), config(), a.path(), "ep").unwrap();
        let pb = write_log(&traj(), config(), b.path(), "ep").unwrap();
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }

    #[test]
    fn corrupt_logs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"type\":\"step\"}\n").unwrap();
        assert!(matches!(read_log(&p), Err(LogError::CorruptLog { .. })));
        fs::write(&p, "not json\n").unwrap();
        assert!(matches!(read_log(&p), Err(LogError::CorruptLog { .. })));
    }
}
