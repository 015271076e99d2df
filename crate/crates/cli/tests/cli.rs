use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn cua(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cua")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_manifest(dir: &Path, scenario: &str, script: &str) -> String {
    let p = dir.join("manifest.toml");
    std::fs::write(
        &p,
        format!(
            "schema = \"cua-manifest/1\"\nruns_per_task = 2\n\n[[tasks]]\nid = \"t\"\ninstruction = \"do it\"\nscenario = \"{scenario}\"\nscript = \"{script}\"\nmax_steps = 15\n"
        ),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_replay_stats_and_loop_detect() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), "builtin:reader_mode", "builtin:reader_mode");
    let out = dir.path().join("out");
    let o = cua(&["run", &m, "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pass@2 = 1.0000"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let log = summary["episodes"][0]["log"].as_str().unwrap().to_string();

    let o = cua(&["replay", &log]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 divergence(s)"));
    let o = cua(&["replay", &log, "--checks", "loop,round-trip", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["checks"], serde_json::json!(["loop", "round_trip"]));

    let o = cua(&["stats", out.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["episodes"], 2);
    assert_eq!(v["pass_at_k"]["1"], 1.0);

    let o = cua(&["loop-detect", &log]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().nth(6).unwrap().starts_with("step 6: steps 3..6 repeat 0..3"), "{text}");
    assert_eq!(stdout(&cua(&["loop-detect", &log, "--sequential"])), text);
}

#[test]
fn failing_episodes_and_bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(dir.path(), "builtin:stuck", "builtin:stuck");
    let out = dir.path().join("out");
    let o = cua(&["run", &m, "--out", out.to_str().unwrap(), "--max-steps", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("BudgetExhausted in 4 steps"));

    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "not json\n").unwrap();
    assert_eq!(cua(&["replay", junk.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cua(&["run", "/nonexistent/manifest.toml"]).status.code(), Some(2));
    assert_eq!(cua(&["stats", dir.path().join("empty").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn conformance_against_served_scenario() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_cua"))
        .args(["serve", "builtin:save_file", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    let o = cua(&["conformance", "--addr", &format!("tcp://{addr}")]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
    assert!(server.wait().unwrap().success());
}
