//! Episode data model: steps, the orchestrator's short-term window, the
//! milestone-gated long-term view, and the knowledge store.

mod log;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::actions::{Action, GroundedAction, ScreenGeometry};
use crate::backends::{Role, TokenCount};
use crate::rma::{AuxiliarySignals, ReflectionMessage};
use crate::tools::ToolRecord;
use crate::vision::{FeatureCache, FeatureMetrics, SsimBuffer, VisionError};

pub use log::{
    encode_png, read_log, step_record, write_log, EndRecord, LogConfig, LogError, LogHeader, LogRecord, LoggedEpisode, StepRecord,
    LOG_SCHEMA,
};

#[derive(Debug)]
struct ObsInner {
    image: RgbImage,
    features: FeatureCache,
    png: OnceLock<(Arc<Vec<u8>>, String)>,
}

/// A screenshot plus its write-once feature cache. Clones share the cache.
#[derive(Debug, Clone)]
pub struct Observation {
    inner: Arc<ObsInner>,
    pub step_index: usize,
}

impl Observation {
    pub fn new(image: RgbImage, step_index: usize) -> Self {
        Observation {
            inner: Arc::new(ObsInner {
                image,
                features: FeatureCache::default(),
                png: OnceLock::new(),
            }),
            step_index,
        }
    }

    pub fn image(&self) -> &RgbImage {
        &self.inner.image
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.inner.image.dimensions()
    }

    pub fn with_index(&self, step_index: usize) -> Self {
        Observation {
            inner: self.inner.clone(),
            step_index,
        }
    }

    pub fn features(&self) -> &FeatureCache {
        &self.inner.features
    }

    pub fn phash(&self, metrics: Option<&FeatureMetrics>) -> Result<u64, VisionError> {
        self.inner.features.phash(&self.inner.image, metrics)
    }

    pub fn ssim_buffer(&self, metrics: Option<&FeatureMetrics>) -> Result<Arc<SsimBuffer>, VisionError> {
        self.inner.features.ssim_buffer(&self.inner.image, metrics)
    }

    /// Same pixels, empty feature cache.
    pub fn without_cache(&self) -> Self {
        Observation::new(self.inner.image.clone(), self.step_index)
    }

    pub fn png(&self) -> Arc<Vec<u8>> {
        self.png_and_hash().0.clone()
    }

    /// 64-hex SHA-256 of the PNG encoding.
    pub fn content_hash(&self) -> &str {
        &self.png_and_hash().1
    }

    fn png_and_hash(&self) -> &(Arc<Vec<u8>>, String) {
        self.inner.png.get_or_init(|| {
            let bytes = encode_png(&self.inner.image);
            let hash = hex::encode(Sha256::digest(&bytes));
            (Arc::new(bytes), hash)
        })
    }

    pub fn same_pixels(&self, other: &Observation) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner) || self.inner.image == other.inner.image
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub text: String,
    pub success: bool,
    /// The verdict token was missing twice and `success` fell back to true.
    #[serde(default)]
    pub defaulted: bool,
}

/// Ordered stages of one kernel iteration, recorded per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Summarize,
    LoopDetect,
    Reflect,
    Decide,
    Ground,
    Dispatch,
}

#[derive(Debug, Clone)]
pub struct Step {
    pub index: usize,
    pub observation: Observation,
    pub thought: String,
    pub action: Action,
    pub grounded: Option<GroundedAction>,
    pub summary: Option<StepSummary>,
    pub milestone: bool,
    pub raw_output: String,
    pub reflection: Option<ReflectionMessage>,
    pub signals: Option<AuxiliarySignals>,
    pub tokens: BTreeMap<Role, TokenCount>,
    pub reflection_error: Option<String>,
    /// Hashes of the images in the orchestrator request, in order.
    pub context_image_refs: Vec<String>,
    /// Hashes of the images in the reflection request, when one was made.
    pub rma_image_refs: Option<Vec<String>>,
    pub tutorials_in_context: usize,
    pub phases: Vec<Phase>,
    pub tool: Option<ToolRecord>,
    pub note: Option<String>,
    pub warnings: Vec<String>,
}

impl Step {
    pub fn new(index: usize, observation: Observation, action: Action) -> Self {
        Step {
            index,
            observation,
            thought: String::new(),
            action,
            grounded: None,
            summary: None,
            milestone: false,
            raw_output: String::new(),
            reflection: None,
            signals: None,
            tokens: BTreeMap::new(),
            reflection_error: None,
            context_image_refs: Vec::new(),
            rma_image_refs: None,
            tutorials_in_context: 0,
            phases: Vec::new(),
            tool: None,
            note: None,
            warnings: Vec::new(),
        }
    }

    pub fn points(&self) -> Option<&[crate::actions::Point]> {
        self.grounded.as_ref().map(|g| g.points.as_slice())
    }

    pub fn add_tokens(&mut self, role: Role, t: TokenCount) {
        self.tokens.entry(role).or_default().add(t);
    }

    /// Whether the action reached the GUI environment (and so gets a summary).
    pub fn was_dispatched(&self) -> bool {
        self.action.kind().is_env_dispatched() && self.grounded.as_ref().is_some_and(GroundedAction::is_dispatchable)
    }

    /// Text contributed to long-term memory for this step.
    pub fn memory_text(&self) -> String {
        match (&self.summary, &self.note) {
            (Some(s), _) => s.text.clone(),
            (None, Some(n)) => format!("{} -> {}", self.action, n),
            (None, None) => format!("{} (not executed in the GUI)", self.action),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tutorial {
    pub query: String,
    pub steps: Vec<String>,
    pub source_urls: Vec<String>,
}

impl Tutorial {
    pub fn render(&self) -> String {
        let mut out = format!("Tutorial for \"{}\":\n", self.query);
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, s));
        }
        if !self.source_urls.is_empty() {
            out.push_str(&format!("Sources: {}\n", self.source_urls.join(", ")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub text: String,
    pub origin_step: usize,
}

/// Append-only store of extracted facts, deduplicated by exact text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeStore {
    entries: Vec<KnowledgeEntry>,
}

impl KnowledgeStore {
    /// Returns false when the text was empty or already present.
    pub fn add(&mut self, text: &str, origin_step: usize) -> bool {
        let text = text.trim();
        if text.is_empty() {
            return false;
        }
        if self.entries.iter().any(|e| e.text == text) {
            tracing::debug!(%text, "duplicate knowledge ignored");
            return false;
        }
        self.entries.push(KnowledgeEntry {
            text: text.to_string(),
            origin_step,
        });
        true
    }

    pub fn recall(&self) -> String {
        self.entries.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Done,
    Fail,
    BudgetExhausted,
    /// Environment or backend failure ended the episode.
    Aborted,
}

impl Outcome {
    pub fn is_terminal(self) -> bool {
        self != Outcome::Running
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("episode already closed ({0:?})")]
    EpisodeClosed(Outcome),
    #[error("step index {got} does not follow trajectory length {expected}")]
    IndexMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub task_id: String,
    pub task_instruction: String,
    pub steps: Vec<Step>,
    pub tutorials: Vec<Tutorial>,
    pub knowledge: KnowledgeStore,
    pub outcome: Outcome,
    pub abort_reason: Option<String>,
    pub screen: ScreenGeometry,
    pub env_handle: String,
    pub run_index: usize,
    pub temperature: f64,
    /// Whether the environment's success check held at the end, when it has one.
    pub success: Option<bool>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, instruction: impl Into<String>, screen: ScreenGeometry) -> Self {
        Trajectory {
            task_id: task_id.into(),
            task_instruction: instruction.into(),
            steps: Vec::new(),
            tutorials: Vec::new(),
            knowledge: KnowledgeStore::default(),
            outcome: Outcome::Running,
            abort_reason: None,
            screen,
            env_handle: String::new(),
            run_index: 0,
            temperature: 0.1,
            success: None,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn append_step(&mut self, step: Step) -> Result<(), TrajectoryError> {
        if self.outcome != Outcome::Running {
            return Err(TrajectoryError::EpisodeClosed(self.outcome));
        }
        if step.index != self.steps.len() {
            return Err(TrajectoryError::IndexMismatch {
                expected: self.steps.len(),
                got: step.index,
            });
        }
        match step.action {
            Action::Done => self.outcome = Outcome::Done,
            Action::Fail => self.outcome = Outcome::Fail,
            _ => {}
        }
        self.steps.push(step);
        Ok(())
    }

    /// Moves a running episode to a non-step terminal state.
    pub fn close(&mut self, outcome: Outcome, reason: Option<String>) {
        if self.outcome == Outcome::Running {
            self.outcome = outcome;
            self.abort_reason = reason;
        }
    }

    pub fn attach_tutorial(&mut self, t: Tutorial) {
        self.tutorials.push(t);
    }

    pub fn tutorial_text(&self) -> Option<String> {
        if self.tutorials.is_empty() {
            None
        } else {
            Some(self.tutorials.iter().map(Tutorial::render).collect::<Vec<_>>().join("\n"))
        }
    }

    pub fn token_totals(&self) -> BTreeMap<Role, TokenCount> {
        let mut out: BTreeMap<Role, TokenCount> = BTreeMap::new();
        for s in &self.steps {
            for (r, t) in &s.tokens {
                out.entry(*r).or_default().add(*t);
            }
        }
        out
    }
}

/// The most recent `min(k - 1, len)` completed steps, oldest first.
pub fn short_term_window(traj: &Trajectory, k: usize) -> &[Step] {
    let keep = k.saturating_sub(1).min(traj.steps.len());
    &traj.steps[traj.steps.len() - keep..]
}

#[derive(Debug, Clone)]
pub struct LongTermEntry {
    pub index: usize,
    pub summary: String,
    pub success: Option<bool>,
    pub milestone: bool,
    pub screenshot: Option<Observation>,
}

/// The reflection agent's memory: every step's summary, screenshots only at
/// milestones (the initial screenshot always counts as one).
#[derive(Debug, Clone, Default)]
pub struct LongTermMemory {
    pub entries: Vec<LongTermEntry>,
    pub knowledge: Vec<KnowledgeEntry>,
}

impl LongTermMemory {
    pub fn screenshots(&self) -> impl Iterator<Item = (usize, &Observation)> {
        self.entries
            .iter()
            .filter_map(|e| e.screenshot.as_ref().map(|o| (e.index, o)))
    }

    pub fn image_count(&self) -> usize {
        self.screenshots().count()
    }
}

pub fn long_term_view(traj: &Trajectory) -> LongTermMemory {
    let entries = traj
        .steps
        .iter()
        .map(|s| {
            let keep = s.milestone || s.index == 0;
            LongTermEntry {
                index: s.index,
                summary: s.memory_text(),
                success: s.summary.as_ref().map(|x| x.success),
                milestone: s.milestone,
                screenshot: keep.then(|| s.observation.clone()),
            }
        })
        .collect();
    LongTermMemory {
        entries,
        knowledge: traj.knowledge.entries().to_vec(),
    }
}
