//! Offline statistics over trajectory logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pass_at_k;
use crate::actions::parse_action;
use crate::backends::{Role, TokenCount};
use crate::trajectory::{read_log, LoggedEpisode, StepRecord};

pub const CROSSTAB_ROWS: [&str; 4] = ["gui_failure", "loop", "code_verification", "normal"];
pub const CROSSTAB_COLUMNS: [&str; 8] = [
    "on_track",
    "completed",
    "infeasible",
    "gui_error",
    "lack_of_tutorial",
    "code_error",
    "other_error",
    "parse_error",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDistributions {
    /// Episode length to number of episodes.
    pub success: BTreeMap<usize, u64>,
    pub failure: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub episodes: usize,
    pub steps: usize,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub action_histogram: BTreeMap<String, HistogramEntry>,
    pub token_totals: BTreeMap<Role, TokenCount>,
    /// Signal row to RMA class column to count.
    pub protocol_crosstab: BTreeMap<String, BTreeMap<String, u64>>,
    /// Steps on which each signal row fired.
    pub signal_counts: BTreeMap<String, u64>,
    pub step_distributions: StepDistributions,
    /// Episodes whose end-record token totals disagree with their steps.
    pub conservation_errors: Vec<String>,
    /// Logs that could not be read.
    pub skipped: Vec<String>,
}

fn action_kind(s: &StepRecord) -> String {
    match parse_action(&s.action) {
        Ok(a) => a.kind().method_name().to_string(),
        Err(_) => "unparseable".to_string(),
    }
}

/// Rows a step counts under. A step with no signal falls in `normal`.
pub fn signal_rows(s: &StepRecord) -> Vec<&'static str> {
    let Some(sig) = &s.signals else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    if sig.gui_failure == Some(true) {
        rows.push("gui_failure");
    }
    if sig.loop_match.is_some() {
        rows.push("loop");
    }
    if sig.coder_pending_verification {
        rows.push("code_verification");
    }
    if rows.is_empty() {
        rows.push("normal");
    }
    rows
}

/// RMA class of a step, if the RMA ran on it.
pub fn rma_class(s: &StepRecord) -> Option<&'static str> {
    match (&s.reflection, &s.reflection_error) {
        (Some(r), _) => Some(r.class_name()),
        (None, Some(_)) => Some("parse_error"),
        (None, None) => None,
    }
}

fn episode_success(e: &LoggedEpisode) -> bool {
    e.end
        .as_ref()
        .map(|end| end.success.unwrap_or(end.outcome == crate::trajectory::Outcome::Done))
        .unwrap_or(false)
}

/// Pure function of the logs.
pub fn stats(logs: &[LoggedEpisode]) -> StatsReport {
    let mut r = StatsReport {
        episodes: logs.len(),
        ..Default::default()
    };
    for row in CROSSTAB_ROWS {
        r.signal_counts.insert(row.into(), 0);
        r.protocol_crosstab
            .insert(row.into(), CROSSTAB_COLUMNS.iter().map(|c| (c.to_string(), 0)).collect());
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut runs: BTreeMap<String, Vec<(usize, bool)>> = BTreeMap::new();
    for e in logs {
        r.steps += e.steps.len();
        for s in &e.steps {
            *counts.entry(action_kind(s)).or_default() += 1;
            let class = rma_class(s);
            for row in signal_rows(s) {
                *r.signal_counts.get_mut(row).expect("row seeded") += 1;
                if let Some(c) = class {
                    *r.protocol_crosstab.get_mut(row).expect("row seeded").entry(c.into()).or_default() += 1;
                }
            }
        }
        let sum = e.token_sum();
        for (role, t) in &sum {
            r.token_totals.entry(*role).or_default().add(*t);
        }
        if let Some(end) = &e.end {
            if end.token_totals != sum {
                r.conservation_errors.push(format!(
                    "{}: end record totals differ from per-step sums",
                    e.path.display()
                ));
            }
        }
        let ok = episode_success(e);
        let dist = if ok {
            &mut r.step_distributions.success
        } else {
            &mut r.step_distributions.failure
        };
        *dist.entry(e.steps.len()).or_default() += 1;
        runs.entry(e.header.task_id.clone())
            .or_default()
            .push((e.header.run_index, ok));
    }
    let total: u64 = counts.values().sum();
    r.action_histogram = counts
        .into_iter()
        .map(|(k, count)| {
            (
                k,
                HistogramEntry {
                    count,
                    fraction: count as f64 / total as f64,
                },
            )
        })
        .collect();
    let results: BTreeMap<String, Vec<bool>> = runs
        .into_iter()
        .map(|(t, mut v)| {
            v.sort();
            (t, v.into_iter().map(|(_, ok)| ok).collect())
        })
        .collect();
    let max_k = results.values().map(Vec::len).min().unwrap_or(0);
    for k in 1..=max_k {
        if let Ok(rate) = pass_at_k(&results, k) {
            r.pass_at_k.insert(k, rate);
        }
    }
    r
}

/// Reads and summarizes logs; unreadable ones are skipped with a warning.
pub fn stats_from_paths(paths: &[impl AsRef<Path>]) -> StatsReport {
    let mut logs = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        match read_log(p.as_ref()) {
            Ok(l) => logs.push(l),
            Err(e) => {
                tracing::warn!(error = %e, "log skipped");
                skipped.push(e.to_string());
            }
        }
    }
    let mut r = stats(&logs);
    r.skipped = skipped;
    r
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "episodes: {}  steps: {}", self.episodes, self.steps);
        if !self.pass_at_k.is_empty() {
            let _ = writeln!(o, "\npass@k");
            for (k, v) in &self.pass_at_k {
                let _ = writeln!(o, "  {k:>3}  {:.4}", v);
            }
        }
        let _ = writeln!(o, "\nactions");
        let mut hist: Vec<_> = self.action_histogram.iter().collect();
        hist.sort_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.cmp(b.0)));
        for (k, h) in hist {
            let _ = writeln!(o, "  {k:<22} {:>6}  {:>6.2}%", h.count, h.fraction * 100.0);
        }
        let _ = writeln!(o, "\ntokens");
        let _ = writeln!(o, "  {:<14} {:>12} {:>12}", "role", "prompt", "completion");
        for (role, t) in &self.token_totals {
            let mark = if t.estimated { " (est.)" } else { "" };
            let _ = writeln!(o, "  {:<14} {:>12} {:>12}{mark}", role.as_str(), t.prompt, t.completion);
        }
        let _ = writeln!(o, "\nprotocol");
        let _ = write!(o, "  {:<18}", "signal");
        for c in CROSSTAB_COLUMNS {
            let _ = write!(o, " {c:>16}");
        }
        let _ = writeln!(o, " {:>8}", "total");
        for row in CROSSTAB_ROWS {
            let _ = write!(o, "  {row:<18}");
            for c in CROSSTAB_COLUMNS {
                let _ = write!(o, " {:>16}", self.protocol_crosstab[row][c]);
            }
            let _ = writeln!(o, " {:>8}", self.signal_counts[row]);
        }
        let _ = writeln!(o, "\nsteps per episode");
        for (label, d) in [("success", &self.step_distributions.success), ("failure", &self.step_distributions.failure)] {
            let cells: Vec<String> = d.iter().map(|(n, c)| format!("{n}:{c}")).collect();
            let _ = writeln!(o, "  {label:<8} {}", cells.join(" "));
        }
        for e in &self.conservation_errors {
            let _ = writeln!(o, "conservation: {e}");
        }
        for s in &self.skipped {
            let _ = writeln!(o, "skipped: {s}");
        }
        o
    }
}
