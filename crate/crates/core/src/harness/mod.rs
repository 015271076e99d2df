//! Batch runner over a task manifest, Pass@K, offline statistics and log
//! replay.

pub mod replay;
pub mod script;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::sim::{Scenario, SimulatedEnvironment};
use crate::backends::wire::WireEnvironment;
use crate::backends::{Backends, Environment, HttpBackend, HttpConfig, Role, SandboxFactory};
use crate::orchestrator::{run_episode, EpisodeDeps, EpisodeTask, OrchestratorConfig};
use crate::trajectory::{write_log, Outcome};

pub use replay::{replay, Divergence, ReplayCheck, ReplayReport};
pub use script::{ScriptFile, SCRIPT_SCHEMA};
pub use stats::{stats, stats_from_paths, HistogramEntry, StatsReport, StepDistributions, CROSSTAB_COLUMNS, CROSSTAB_ROWS};

pub const MANIFEST_SCHEMA: &str = "cua-manifest/1";
pub const SUMMARY_SCHEMA: &str = "cua-run-summary/1";

/// Scenarios and scripts compiled into the binary, addressed as
/// `builtin:<name>`.
pub const BUILTIN_SCENARIOS: [(&str, &str); 3] = [
    ("reader_mode", include_str!("../../fixtures/scenarios/reader_mode.toml")),
    ("save_file", include_str!("../../fixtures/scenarios/save_file.toml")),
    ("stuck", include_str!("../../fixtures/scenarios/stuck.toml")),
];
pub const BUILTIN_SCRIPTS: [(&str, &str); 3] = [
    ("reader_mode", include_str!("../../fixtures/scripts/reader_mode.toml")),
    ("save_file", include_str!("../../fixtures/scripts/save_file.toml")),
    ("stuck", include_str!("../../fixtures/scripts/stuck.toml")),
];

fn builtin<'a>(table: &[(&str, &'a str)], name: &str) -> Option<&'a str> {
    table.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("task {task:?} has {have} runs, pass@{need} needs {need}")]
    InsufficientRuns { task: String, have: usize, need: usize },
    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: String,
    pub instruction: String,
    /// Scenario file relative to the manifest, `builtin:<name>`, or
    /// `tcp://host:port` for an environment adapter behind the wire.
    pub scenario: String,
    /// Scripted replies; without one the manifest's HTTP backends are used.
    #[serde(default)]
    pub script: Option<String>,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSpec {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_runs() -> usize {
    1
}
fn default_workers() -> usize {
    1
}
fn default_base_temperature() -> f64 {
    0.1
}
fn default_increment() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub schema: String,
    pub tasks: Vec<TaskEntry>,
    #[serde(default = "default_runs")]
    pub runs_per_task: usize,
    #[serde(default = "default_base_temperature")]
    pub base_temperature: f64,
    /// Added to the temperature on every further pass.
    #[serde(default = "default_increment")]
    pub temperature_schedule: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Keys: `default` or a role name.
    #[serde(default)]
    pub backends: BTreeMap<String, HttpSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl TaskManifest {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut m: TaskManifest = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema != MANIFEST_SCHEMA {
            return bad(format!("unsupported manifest schema {:?}", self.schema));
        }
        if self.runs_per_task < 1 {
            return bad("runs_per_task must be >= 1".into());
        }
        if self.workers < 1 {
            return bad("workers must be >= 1".into());
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(&t.id) {
                return bad(format!("duplicate task id {:?}", t.id));
            }
            if t.max_steps == Some(0) {
                return bad(format!("task {:?}: max_steps must be >= 1", t.id));
            }
        }
        for k in self.backends.keys() {
            if k != "default" && !Role::ALL.iter().any(|r| r.as_str() == k) {
                return bad(format!("unknown backend role {k:?}"));
            }
        }
        let top = self.temperature_for_pass(self.runs_per_task - 1);
        if !(0.0..=2.0).contains(&self.base_temperature) || !(0.0..=2.0).contains(&top) {
            return bad("temperature schedule leaves [0, 2]".into());
        }
        Ok(())
    }

    /// Temperature of pass `p` (0-based), rounded to 1e-9 so that 0.1 + 0.2
    /// is logged as 0.3.
    pub fn temperature_for_pass(&self, p: usize) -> f64 {
        let t = self.base_temperature + self.temperature_schedule * p as f64;
        (t * 1e9).round() / 1e9
    }

    fn resolve(&self, r: &str) -> PathBuf {
        self.base_dir.join(r)
    }

    fn load_text(&self, r: &str, table: &[(&str, &'static str)]) -> Result<String, String> {
        if let Some(name) = r.strip_prefix("builtin:") {
            return builtin(table, name)
                .map(str::to_string)
                .ok_or_else(|| format!("no builtin named {name:?}"));
        }
        let p = self.resolve(r);
        fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
    }

    fn http_backends(&self) -> Result<Backends, String> {
        let build = |s: &HttpSpec| -> Arc<dyn crate::backends::ModelBackend> {
            Arc::new(HttpBackend::new(HttpConfig {
                endpoint: s.endpoint.clone(),
                model: s.model.clone(),
                api_key_env: s.api_key_env.clone(),
                timeout: Duration::from_secs(s.timeout_secs),
                max_retries: s.max_retries,
                ..HttpConfig::default()
            }))
        };
        let mut b = match self.backends.get("default") {
            Some(s) => Backends::uniform(build(s)),
            None => Backends::default(),
        };
        for r in Role::ALL {
            if let Some(s) = self.backends.get(r.as_str()) {
                b = b.with(r, build(s));
            }
        }
        for r in Role::ALL {
            if b.get(r).is_err() {
                return Err(format!("no backend configured for role {}", r.as_str()));
            }
        }
        Ok(b)
    }
}

/// One (task, pass) outcome as recorded in the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub run_index: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    pub success: bool,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub episodes: Vec<EpisodeRecord>,
    pub pass_at_k: BTreeMap<usize, f64>,
}

impl RunSummary {
    pub fn has_failures(&self) -> bool {
        self.episodes.iter().any(|e| !e.success || e.error.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Template for every episode; temperature and run index are overridden
    /// per pass and max_steps per task.
    pub orchestrator: OrchestratorConfig,
    pub workers: Option<usize>,
}

struct Prepared {
    env: Box<dyn Environment>,
    sandbox: Option<Arc<dyn SandboxFactory>>,
    backends: Backends,
}

fn prepare(m: &TaskManifest, t: &TaskEntry) -> Result<Prepared, String> {
    let (env, sandbox): (Box<dyn Environment>, Option<Arc<dyn SandboxFactory>>) =
        if let Some(addr) = t.scenario.strip_prefix("tcp://") {
            (Box::new(WireEnvironment::connect(addr).map_err(|e| e.to_string())?), None)
        } else {
            let sc = Scenario::from_toml(&m.load_text(&t.scenario, &BUILTIN_SCENARIOS)?)
                .map_err(|e| format!("scenario {}: {e}", t.scenario))?;
            let sandbox = sc.sandbox_factory().map(|f| Arc::new(f) as Arc<dyn SandboxFactory>);
            (Box::new(SimulatedEnvironment::new(sc)?), sandbox)
        };
    let backends = match &t.script {
        Some(s) => {
            let sf = ScriptFile::from_toml(&m.load_text(s, &BUILTIN_SCRIPTS)?).map_err(|e| format!("script {s}: {e}"))?;
            Backends::uniform(Arc::new(sf.backend()))
        }
        None => m.http_backends()?,
    };
    Ok(Prepared { env, sandbox, backends })
}

fn run_one(m: &TaskManifest, t: &TaskEntry, pass: usize, opts: &RunOptions) -> EpisodeRecord {
    let temperature = m.temperature_for_pass(pass);
    let mut rec = EpisodeRecord {
        task_id: t.id.clone(),
        run_index: pass,
        temperature,
        outcome: None,
        success: false,
        steps: 0,
        log: None,
        error: None,
    };
    let mut p = match prepare(m, t) {
        Ok(p) => p,
        Err(e) => {
            tracing::error!(task = %t.id, error = %e, "task skipped");
            rec.error = Some(e);
            return rec;
        }
    };
    let cfg = OrchestratorConfig {
        temperature,
        run_index: pass,
        max_steps: t.max_steps.unwrap_or(opts.orchestrator.max_steps),
        ..opts.orchestrator.clone()
    };
    let task = EpisodeTask {
        id: t.id.clone(),
        instruction: t.instruction.clone(),
    };
    let traj = run_episode(
        &task,
        EpisodeDeps {
            env: p.env.as_mut(),
            sandbox: p.sandbox.as_deref(),
            backends: &p.backends,
            metrics: None,
        },
        &cfg,
    );
    rec.outcome = Some(traj.outcome);
    rec.steps = traj.steps.len();
    rec.success = traj.success.unwrap_or(traj.outcome == Outcome::Done);
    if let Some(reason) = &traj.abort_reason {
        rec.error = Some(reason.clone());
    }
    match write_log(&traj, cfg.log_config(traj.screen), &opts.out_dir, &format!("{}-run{}", t.id, pass)) {
        Ok(path) => rec.log = Some(path.display().to_string()),
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs every task `runs_per_task` times. Failures are recorded per episode;
/// only an unusable manifest or output directory is an error.
pub fn run(m: &TaskManifest, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    m.validate()?;
    opts.orchestrator
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::create_dir_all(&opts.out_dir).map_err(|e| HarnessError::Io {
        path: opts.out_dir.clone(),
        reason: e.to_string(),
    })?;
    let jobs: Vec<(&TaskEntry, usize)> = m
        .tasks
        .iter()
        .flat_map(|t| (0..m.runs_per_task).map(move |p| (t, p)))
        .collect();
    let workers = opts.workers.unwrap_or(m.workers).max(1);
    let episodes = execute(&jobs, workers, |&(t, p)| run_one(m, t, p, opts));

    let mut results: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for e in &episodes {
        results.entry(e.task_id.clone()).or_default().push(e.success);
    }
    let pass = (1..=m.runs_per_task)
        .filter_map(|k| pass_at_k(&results, k).ok().map(|r| (k, r)))
        .collect();
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        episodes,
        pass_at_k: pass,
    };
    let path = opts.out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(|e| HarnessError::Io {
        path,
        reason: e.to_string(),
    })?;
    Ok(summary)
}

#[cfg(feature = "parallel")]
fn execute<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(&f).collect()),
        Err(_) => jobs.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn execute<J: Sync, R: Send>(jobs: &[J], _workers: usize, f: impl Fn(&J) -> R + Sync + Send) -> Vec<R> {
    jobs.iter().map(f).collect()
}

/// Fraction of tasks with at least one success among their first `k` runs.
pub fn pass_at_k(results: &BTreeMap<String, Vec<bool>>, k: usize) -> Result<f64, HarnessError> {
    if k == 0 {
        return Err(HarnessError::Config("k must be >= 1".into()));
    }
    if results.is_empty() {
        return Err(HarnessError::Config("no tasks".into()));
    }
    let mut solved = 0usize;
    for (task, runs) in results {
        if runs.len() < k {
            return Err(HarnessError::InsufficientRuns {
                task: task.clone(),
                have: runs.len(),
                need: k,
            });
        }
        if runs[..k].iter().any(|&s| s) {
            solved += 1;
        }
    }
    Ok(solved as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(pairs: &[(&str, &[bool])]) -> BTreeMap<String, Vec<bool>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_vec())).collect()
    }

    #[test]
    fn pass_at_k_examples() {
        let r = res(&[("A", &[true, false]), ("B", &[false, false])]);
        assert_eq!(pass_at_k(&r, 1).unwrap(), 0.5);
        assert_eq!(pass_at_k(&r, 2).unwrap(), 0.5);
        let r = res(&[("A", &[false, true]), ("B", &[false, false])]);
        assert_eq!(pass_at_k(&r, 1).unwrap(), 0.0);
        assert_eq!(pass_at_k(&r, 2).unwrap(), 0.5);
        assert!(matches!(pass_at_k(&r, 3), Err(HarnessError::InsufficientRuns { need: 3, .. })));
        let all = res(&[("A", &[true, true]), ("B", &[true, true])]);
        assert_eq!(pass_at_k(&all, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(&all, 2).unwrap(), 1.0);
    }

    #[test]
    fn manifest_validation_and_schedule() {
        let base = Path::new(".");
        let ok = "schema = \"cua-manifest/1\"\nruns_per_task = 3\n[[tasks]]\nid = \"a\"\ninstruction = \"x\"\nscenario = \"builtin:stuck\"\n";
        let m = TaskManifest::from_toml(ok, base).unwrap();
        assert_eq!(
            (0..3).map(|p| m.temperature_for_pass(p)).collect::<Vec<_>>(),
            vec![0.1, 0.2, 0.3]
        );
        let dup = format!("{ok}[[tasks]]\nid = \"a\"\ninstruction = \"y\"\nscenario = \"builtin:stuck\"\n");
        assert!(TaskManifest::from_toml(&dup, base).is_err());
        assert!(TaskManifest::from_toml(&ok.replace("runs_per_task = 3", "runs_per_task = 0"), base).is_err());
        assert!(TaskManifest::from_toml(&ok.replace("cua-manifest/1", "v0"), base).is_err());
    }

    #[test]
    fn builtins_parse() {
        for (n, t) in BUILTIN_SCENARIOS {
            Scenario::from_toml(t).unwrap_or_else(|e| panic!("{n}: {e}"));
        }
        for (n, t) in BUILTIN_SCRIPTS {
            ScriptFile::from_toml(t).unwrap_or_else(|e| panic!("{n}: {e}"));
        }
    }
}
