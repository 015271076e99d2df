use std::fs;
use std::path::Path;
use std::sync::Arc;

use cua_kernel::actions::ActionKind;
use cua_kernel::backends::sim::{Scenario, SimulatedEnvironment};
use cua_kernel::backends::{Backends, Role, ScriptedBackend, SandboxFactory};
use cua_kernel::harness::{self, replay, ReplayCheck, ScriptFile, BUILTIN_SCENARIOS, BUILTIN_SCRIPTS};
use cua_kernel::orchestrator::{run_episode, EpisodeDeps, EpisodeTask, OrchestratorConfig};
use cua_kernel::rma::ErrorType;
use cua_kernel::trajectory::{read_log, write_log, Outcome, Trajectory};

fn builtin(table: &[(&str, &'static str)], name: &str) -> &'static str {
    table.iter().find(|(n, _)| *n == name).unwrap().1
}

fn episode(name: &str, instruction: &str, max_steps: usize) -> (Trajectory, Arc<ScriptedBackend>, usize) {
    let sc = Scenario::from_toml(builtin(&BUILTIN_SCENARIOS, name)).unwrap();
    let factory = sc.sandbox_factory();
    let mut env = SimulatedEnvironment::new(sc).unwrap();
    let backend = Arc::new(ScriptFile::from_toml(builtin(&BUILTIN_SCRIPTS, name)).unwrap().backend());
    let cfg = OrchestratorConfig {
        max_steps,
        ..Default::default()
    };
    let traj = run_episode(
        &EpisodeTask {
            id: name.into(),
            instruction: instruction.into(),
        },
        EpisodeDeps {
            env: &mut env,
            sandbox: factory.as_ref().map(|f| f as &dyn SandboxFactory),
            backends: &Backends::uniform(backend.clone()),
            metrics: None,
        },
        &cfg,
    );
    let opened = factory.map_or(0, |f| f.opened());
    (traj, backend, opened)
}

fn log_bytes(traj: &Trajectory, dir: &Path) -> Vec<u8> {
    let p = write_log(traj, OrchestratorConfig::default().log_config(traj.screen), dir, "ep").unwrap();
    fs::read(p).unwrap()
}

#[test]
fn three_step_save_reaches_done() {
    let (t, _, _) = episode("save_file", "Save the document as report.txt.", 10);
    assert_eq!(t.outcome, Outcome::Done);
    assert_eq!(t.steps.len(), 3);
    assert_eq!(t.success, Some(true));
    assert!(t.steps[0].milestone);
}

#[test]
fn budget_exhausted_without_done() {
    let (t, b, _) = episode("stuck", "Open the report.", 5);
    assert_eq!(t.outcome, Outcome::BudgetExhausted);
    assert_eq!(t.steps.len(), 5);
    assert_eq!(b.calls(Role::Orchestrator), 5);
    assert_eq!(t.success, Some(false));
    for s in &t.steps[1..] {
        assert_eq!(s.signals.as_ref().unwrap().gui_failure, Some(true));
    }
}

#[test]
fn loop_then_search_then_done() {
    let (t, b, opened) = episode("reader_mode", "Turn on reader mode.", 15);
    assert_eq!(t.outcome, Outcome::Done, "{:?}", t.abort_reason);
    assert_eq!(t.success, Some(true));
    assert_eq!(t.steps.len(), 10);

    let first_loop = t
        .steps
        .iter()
        .position(|s| s.signals.as_ref().is_some_and(|g| g.loop_match.is_some()))
        .unwrap();
    assert_eq!(first_loop, 6);
    let r = t.steps[6].reflection.as_ref().unwrap();
    assert_eq!(r.error_type, Some(ErrorType::LackOfTutorial));
    assert_eq!(t.steps[6].action.kind(), ActionKind::CallSearchAgent);
    assert_eq!(opened, 1);
    assert_eq!(t.tutorials.len(), 1);
    assert!(t.steps[6].tool.is_some());
    assert!(t.steps[6].grounded.is_none());

    assert!(t.steps[..=6].iter().all(|s| s.tutorials_in_context == 0));
    assert!(t.steps[7..].iter().all(|s| s.tutorials_in_context == 1));
    for req in b.requests_for(Role::Orchestrator).iter().skip(7) {
        assert!(req.text().contains("three-dot menu at the top right of the toolbar"));
    }
    for req in b.requests() {
        assert!(req.image_count() <= 8, "{:?} request with {} images", req.role, req.image_count());
    }
}

#[test]
fn replay_is_byte_identical_and_clean() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _, _) = episode("reader_mode", "Turn on reader mode.", 15);
    let (b, _, _) = episode("reader_mode", "Turn on reader mode.", 15);
    let da = dir.path().join("a");
    let db = dir.path().join("b");
    assert_eq!(log_bytes(&a, &da), log_bytes(&b, &db));
    let log = read_log(&da.join("ep.jsonl")).unwrap();
    let rep = replay(&log, &ReplayCheck::ALL).unwrap();
    assert!(rep.is_clean(), "{rep}");
}

#[test]
fn harness_runs_the_demo_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut m = harness::TaskManifest::load(&fixtures.join("manifest.toml")).unwrap();
    m.runs_per_task = 3;
    m.tasks.push(harness::TaskEntry {
        id: "missing".into(),
        instruction: "x".into(),
        scenario: "scenarios/nope.toml".into(),
        script: None,
        max_steps: None,
    });
    let summary = harness::run(
        &m,
        &harness::RunOptions {
            out_dir: dir.path().to_path_buf(),
            orchestrator: OrchestratorConfig::default(),
            workers: Some(4),
        },
    )
    .unwrap();
    assert_eq!(summary.episodes.len(), 12);
    let temps: Vec<f64> = summary.episodes.iter().filter(|e| e.task_id == "reader-mode").map(|e| e.temperature).collect();
    assert_eq!(temps, vec![0.1, 0.2, 0.3]);
    assert!(summary.episodes.iter().filter(|e| e.task_id == "missing").all(|e| e.error.is_some() && e.log.is_none()));
    assert!(summary.has_failures());
    assert!(dir.path().join("summary.json").exists());

    let mut logs = Vec::new();
    for e in summary.episodes.iter().filter_map(|e| e.log.as_ref()) {
        let l = read_log(Path::new(e)).unwrap();
        assert!(replay(&l, &ReplayCheck::ALL).unwrap().is_clean());
        assert_eq!(l.header.temperature, m.temperature_for_pass(l.header.run_index));
        logs.push(l);
    }
    let r = harness::stats(&logs);
    assert_eq!(r.episodes, 9);
    assert_eq!(r.pass_at_k[&1], 2.0 / 3.0);
    assert!(r.conservation_errors.is_empty());
    assert_eq!(r.protocol_crosstab["loop"]["lack_of_tutorial"], 3);
    let total: f64 = r.action_histogram.values().map(|h| h.fraction).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(harness::stats(&logs), r);
}
