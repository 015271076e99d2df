//! Re-derives what can be re-derived from a log and reports where the
//! recorded trajectory disagrees.

use std::fmt;
use std::fs;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::{format_action, parse_action};
use crate::loop_detect::detect_loop_prefixes;
use crate::tools::ToolResult;
use crate::trajectory::{LogError, LoggedEpisode, Phase};
use crate::vision::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayCheck {
    Loop,
    Milestones,
    Budget,
    RoundTrip,
    Bounds,
    Images,
    Tutorials,
    Tokens,
    Phases,
}

impl ReplayCheck {
    pub const ALL: [ReplayCheck; 9] = [
        ReplayCheck::Loop,
        ReplayCheck::Milestones,
        ReplayCheck::Budget,
        ReplayCheck::RoundTrip,
        ReplayCheck::Bounds,
        ReplayCheck::Images,
        ReplayCheck::Tutorials,
        ReplayCheck::Tokens,
        ReplayCheck::Phases,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub check: ReplayCheck,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub log: String,
    pub checks: Vec<ReplayCheck>,
    pub divergences: Vec<Divergence>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergences.is_empty()
    }

    pub fn of(&self, check: ReplayCheck) -> impl Iterator<Item = &Divergence> {
        self.divergences.iter().filter(move |d| d.check == check)
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} divergence(s)", self.log, self.divergences.len())?;
        for d in &self.divergences {
            match d.step {
                Some(i) => writeln!(f, "  [{:?}] step {i}: {}", d.check, d.detail)?,
                None => writeln!(f, "  [{:?}] {}", d.check, d.detail)?,
            }
        }
        Ok(())
    }
}

/// Runs the selected checks. Fails only when the log's images cannot be
/// loaded for loop re-detection.
pub fn replay(log: &LoggedEpisode, checks: &[ReplayCheck]) -> Result<ReplayReport, LogError> {
    let mut rep = ReplayReport {
        log: log.path.display().to_string(),
        checks: checks.to_vec(),
        divergences: Vec::new(),
    };
    let mut push = |check, step, detail: String| rep.divergences.push(Divergence { check, step, detail });
    let cfg = &log.header.config;

    for &check in checks {
        match check {
            ReplayCheck::Loop => {
                let records = log.loop_records()?;
                let redone = detect_loop_prefixes(&records, &cfg.loop_cfg, cfg.screen, None, Exec::Parallel);
                for (i, s) in log.steps.iter().enumerate() {
                    let Some(sig) = &s.signals else { continue };
                    if sig.loop_match != redone[i] {
                        push(
                            check,
                            Some(s.index),
                            format!("logged loop {:?}, re-detected {:?}", sig.loop_match, redone[i]),
                        );
                    }
                }
            }
            ReplayCheck::Milestones => {
                for (i, s) in log.steps.iter().enumerate() {
                    let Some(got) = &s.rma_images else { continue };
                    let marked: Vec<&str> = log.steps[..i]
                        .iter()
                        .filter(|p| p.milestone)
                        .map(|p| p.image.as_str())
                        .collect();
                    let keep = cfg.rma_max_images.saturating_sub(1).min(marked.len());
                    let mut want: Vec<&str> = marked[marked.len() - keep..].to_vec();
                    want.push(s.image.as_str());
                    let mut want_sorted = want.clone();
                    want_sorted.sort();
                    let mut got_sorted: Vec<&str> = got.iter().map(String::as_str).collect();
                    got_sorted.sort();
                    if want_sorted != got_sorted {
                        push(
                            check,
                            Some(s.index),
                            format!("RMA saw {} image(s), milestone gating expects {}", got.len(), want.len()),
                        );
                    }
                }
                if let Some(first) = log.steps.first() {
                    if !first.milestone {
                        push(check, Some(first.index), "initial screenshot not marked as a milestone".into());
                    }
                }
            }
            ReplayCheck::Budget => {
                for s in &log.steps {
                    if s.context_images.len() > cfg.max_images {
                        push(
                            check,
                            Some(s.index),
                            format!("orchestrator context has {} images, budget {}", s.context_images.len(), cfg.max_images),
                        );
                    }
                    if s.context_images.last() != Some(&s.image) {
                        push(check, Some(s.index), "current screenshot is not the last context image".into());
                    }
                    if let Some(r) = &s.rma_images {
                        if r.len() > cfg.rma_max_images {
                            push(
                                check,
                                Some(s.index),
                                format!("RMA context has {} images, budget {}", r.len(), cfg.rma_max_images),
                            );
                        }
                    }
                }
            }
            ReplayCheck::RoundTrip => {
                for s in &log.steps {
                    match parse_action(&s.action) {
                        Ok(a) if format_action(&a) == s.action => {}
                        Ok(a) => push(check, Some(s.index), format!("{:?} re-formats as {:?}", s.action, format_action(&a))),
                        Err(e) => push(check, Some(s.index), format!("{:?} does not parse: {e}", s.action)),
                    }
                }
            }
            ReplayCheck::Bounds => {
                for s in &log.steps {
                    for p in s.points.iter().flatten() {
                        if !cfg.screen.contains(*p) {
                            push(check, Some(s.index), format!("point ({}, {}) off screen", p.x, p.y));
                        }
                    }
                }
            }
            ReplayCheck::Images => {
                let mut seen = std::collections::BTreeSet::new();
                for s in &log.steps {
                    let refs = std::iter::once(&s.image)
                        .chain(&s.context_images)
                        .chain(s.rma_images.iter().flatten());
                    for h in refs {
                        if !seen.insert(h.clone()) {
                            continue;
                        }
                        match fs::read(log.image_path(h)) {
                            Ok(bytes) => {
                                let got = hex::encode(Sha256::digest(&bytes));
                                if &got != h {
                                    push(check, Some(s.index), format!("image {h} hashes to {got}"));
                                }
                            }
                            Err(e) => push(check, Some(s.index), format!("image {h} unreadable: {e}")),
                        }
                    }
                }
            }
            ReplayCheck::Tutorials => {
                for w in log.steps.windows(2) {
                    let (a, b) = (&w[0], &w[1]);
                    let attached = matches!(a.tool.as_ref().map(|t| &t.result), Some(ToolResult::SearchDone { .. }));
                    let want = a.tutorials_in_context + usize::from(attached);
                    if b.tutorials_in_context != want {
                        push(
                            check,
                            Some(b.index),
                            format!("{} tutorial(s) in context, expected {want}", b.tutorials_in_context),
                        );
                    }
                }
                if let (Some(end), Some(last)) = (&log.end, log.steps.last()) {
                    let attached = matches!(last.tool.as_ref().map(|t| &t.result), Some(ToolResult::SearchDone { .. }));
                    if end.tutorials.len() != last.tutorials_in_context + usize::from(attached) {
                        push(check, None, "end record tutorial count disagrees with the steps".into());
                    }
                }
            }
            ReplayCheck::Tokens => {
                if let Some(end) = &log.end {
                    if end.token_totals != log.token_sum() {
                        push(check, None, "end record token totals differ from per-step sums".into());
                    }
                }
            }
            ReplayCheck::Phases => {
                for (i, s) in log.steps.iter().enumerate() {
                    let pos = |p: Phase| s.phases.iter().position(|&x| x == p);
                    let order: Vec<Option<usize>> = [Phase::LoopDetect, Phase::Reflect, Phase::Decide]
                        .into_iter()
                        .map(pos)
                        .collect();
                    let dispatched_before = i > 0 && log.steps[i - 1].phases.contains(&Phase::Dispatch);
                    let mut expected = vec![order[0], order[2]];
                    if i > 0 {
                        expected.insert(1, order[1]);
                    }
                    if dispatched_before {
                        expected.insert(0, pos(Phase::Summarize));
                    }
                    let ok = expected.iter().all(Option::is_some) && expected.windows(2).all(|w| w[0] < w[1]);
                    if !ok {
                        push(check, Some(s.index), format!("phase order {:?}", s.phases));
                    }
                }
            }
        }
    }
    Ok(rep)
}
