use std::fs;
use std::path::{Path, PathBuf};

use cua_kernel::harness::{self, replay, ReplayCheck, RunOptions, TaskManifest};
use cua_kernel::orchestrator::OrchestratorConfig;
use cua_kernel::trajectory::{read_log, LogRecord, LoggedEpisode};

fn run_reader(dir: &Path) -> LoggedEpisode {
    let m = TaskManifest::from_toml(
        r#"
schema = "cua-manifest/1"
[[tasks]]
id = "reader"
instruction = "Turn on reader mode."
scenario = "builtin:reader_mode"
script = "builtin:reader_mode"
max_steps = 15
"#,
        Path::new("."),
    )
    .unwrap();
    let s = harness::run(
        &m,
        &RunOptions {
            out_dir: dir.to_path_buf(),
            orchestrator: OrchestratorConfig::default(),
            workers: None,
        },
    )
    .unwrap();
    read_log(Path::new(s.episodes[0].log.as_ref().unwrap())).unwrap()
}

fn rewrite(log: &LoggedEpisode, name: &str) -> PathBuf {
    let path = log.path.with_file_name(name);
    let mut out = String::new();
    let mut records = vec![LogRecord::Header(log.header.clone())];
    records.extend(log.steps.iter().cloned().map(|s| LogRecord::Step(Box::new(s))));
    records.extend(log.end.clone().map(LogRecord::End));
    for r in records {
        out.push_str(&serde_json::to_string(&r).unwrap());
        out.push('\n');
    }
    fs::write(&path, out).unwrap();
    path
}

#[test]
fn pristine_log_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let log = run_reader(dir.path());
    let rep = replay(&log, &ReplayCheck::ALL).unwrap();
    assert!(rep.is_clean(), "{rep}");
}

#[test]
fn duplicated_window_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = run_reader(dir.path());
    // Turn the search call into one more gear click: the window ending at
    // step 6 now repeats steps 1..4, so step 7 should have seen a loop.
    let src = log.steps[5].clone();
    let s6 = &mut log.steps[6];
    s6.action = src.action;
    s6.points = src.points;
    s6.image = src.image;
    let p = rewrite(&log, "mutated.jsonl");
    let mutated = read_log(&p).unwrap();
    let rep = replay(&mutated, &[ReplayCheck::Loop]).unwrap();
    let hits: Vec<_> = rep.of(ReplayCheck::Loop).collect();
    assert!(hits.iter().any(|d| d.step == Some(7)), "{rep}");
}

#[test]
fn over_budget_and_broken_images_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = run_reader(dir.path());
    let extra = log.steps[8].context_images.clone();
    log.steps[8].context_images = [extra.clone(), extra].concat().into_iter().take(9).collect();
    let current = log.steps[8].image.clone();
    log.steps[8].context_images.push(current);
    log.steps[3].rma_images = Some(vec!["0".repeat(64)]);
    log.steps[0].milestone = false;
    let p = rewrite(&log, "budget.jsonl");
    let bad = read_log(&p).unwrap();
    let rep = replay(&bad, &ReplayCheck::ALL).unwrap();
    assert!(rep.of(ReplayCheck::Budget).any(|d| d.step == Some(8)), "{rep}");
    assert!(rep.of(ReplayCheck::Images).any(|d| d.step == Some(3)), "{rep}");
    assert!(rep.of(ReplayCheck::Milestones).count() >= 2, "{rep}");
}

#[test]
fn tampered_tokens_and_tutorial_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = run_reader(dir.path());
    log.steps[8].tutorials_in_context = 0;
    log.steps[2].tokens.values_mut().next().unwrap().prompt += 1;
    log.steps[4].action = "agent.clack()".into();
    let p = rewrite(&log, "tampered.jsonl");
    let bad = read_log(&p);
    // An unparseable action makes loop re-detection impossible; the other
    // checks still run.
    let bad = bad.unwrap();
    let checks: Vec<ReplayCheck> = ReplayCheck::ALL.into_iter().filter(|c| *c != ReplayCheck::Loop).collect();
    let rep = replay(&bad, &checks).unwrap();
    assert!(rep.of(ReplayCheck::Tutorials).any(|d| d.step == Some(8)), "{rep}");
    assert!(rep.of(ReplayCheck::Tokens).count() == 1, "{rep}");
    assert!(rep.of(ReplayCheck::RoundTrip).any(|d| d.step == Some(4)), "{rep}");
    assert!(replay(&bad, &[ReplayCheck::Loop]).is_err());
}
