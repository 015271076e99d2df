//! `cua`: run manifests, audit logs, and check environment adapters.
//!
//! Exit codes: 0 clean, 1 the command ran but found failures (failed
//! episodes, replay divergences, failed conformance checks), 2 usage or I/O
//! errors.

use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cua_kernel::backends::conformance::{run_conformance, ConformanceFixture};
use cua_kernel::backends::sim::{Scenario, SimulatedEnvironment};
use cua_kernel::backends::wire::{serve_stream, serve_tcp, WireEnvironment};
use cua_kernel::harness::{self, replay, ReplayCheck, RunOptions, TaskManifest, BUILTIN_SCENARIOS};
use cua_kernel::loop_detect::detect_loop_prefixes;
use cua_kernel::orchestrator::OrchestratorConfig;
use cua_kernel::trajectory::read_log;
use cua_kernel::vision::Exec;

#[derive(Parser)]
#[command(name = "cua", version, about = "Computer-using agent orchestration harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of a manifest and write logs plus summary.json.
    Run {
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Worker threads; defaults to the manifest's setting.
        #[arg(long)]
        workers: Option<usize>,
        /// Short-term window K.
        #[arg(long)]
        k: Option<usize>,
        /// Override every task's step budget.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Re-derive recorded decisions from logs and report divergences.
    Replay {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Subset of checks; all by default.
        #[arg(long, value_delimiter = ',')]
        checks: Vec<CheckArg>,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate statistics over logs or directories of logs.
    Stats {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run loop detection over a log, prefix by prefix.
    LoopDetect {
        log: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Check an environment adapter listening on the wire protocol.
    Conformance {
        #[arg(long)]
        addr: String,
        /// Leave the adapter running afterwards.
        #[arg(long)]
        keep_alive: bool,
    },
    /// Serve a simulated scenario on the wire protocol.
    Serve {
        /// Scenario file or builtin:NAME.
        scenario: String,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Speak the protocol on stdin/stdout instead of TCP.
        #[arg(long)]
        stdio: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
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

impl From<CheckArg> for ReplayCheck {
    fn from(c: CheckArg) -> Self {
        match c {
            CheckArg::Loop => ReplayCheck::Loop,
            CheckArg::Milestones => ReplayCheck::Milestones,
            CheckArg::Budget => ReplayCheck::Budget,
            CheckArg::RoundTrip => ReplayCheck::RoundTrip,
            CheckArg::Bounds => ReplayCheck::Bounds,
            CheckArg::Images => ReplayCheck::Images,
            CheckArg::Tutorials => ReplayCheck::Tutorials,
            CheckArg::Tokens => ReplayCheck::Tokens,
            CheckArg::Phases => ReplayCheck::Phases,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Ok(false) means the command completed with findings.
fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run {
            manifest,
            out,
            workers,
            k,
            max_steps,
        } => {
            let mut m = TaskManifest::load(&manifest)?;
            if let Some(n) = max_steps {
                m.tasks.iter_mut().for_each(|t| t.max_steps = Some(n));
            }
            let mut orchestrator = OrchestratorConfig::default();
            if let Some(k) = k {
                orchestrator.k = k;
            }
            let summary = harness::run(
                &m,
                &RunOptions {
                    out_dir: out.clone(),
                    orchestrator,
                    workers,
                },
            )?;
            for e in &summary.episodes {
                let status = match (&e.error, e.outcome) {
                    (Some(err), _) => format!("error: {err}"),
                    (None, Some(o)) => format!("{o:?} in {} steps, success {}", e.steps, e.success),
                    (None, None) => "no outcome".into(),
                };
                println!("{} run {} (T={}): {status}", e.task_id, e.run_index, e.temperature);
            }
            for (k, v) in &summary.pass_at_k {
                println!("pass@{k} = {v:.4}");
            }
            println!("summary: {}", out.join("summary.json").display());
            Ok(!summary.has_failures())
        }
        Command::Replay { logs, checks, json } => {
            let checks: Vec<ReplayCheck> = if checks.is_empty() {
                ReplayCheck::ALL.to_vec()
            } else {
                checks.into_iter().map(Into::into).collect()
            };
            let mut reports = Vec::new();
            for p in &logs {
                let log = read_log(p).with_context(|| format!("reading {}", p.display()))?;
                reports.push(replay(&log, &checks)?);
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                reports.iter().for_each(|r| print!("{r}"));
            }
            Ok(reports.iter().all(|r| r.is_clean()))
        }
        Command::Stats { paths, json } => {
            let mut logs = Vec::new();
            for p in &paths {
                collect_logs(p, &mut logs)?;
            }
            if logs.is_empty() {
                bail!("no .jsonl logs found");
            }
            let r = harness::stats_from_paths(&logs);
            if json {
                println!("{}", r.to_json());
            } else {
                print!("{}", r.render_text());
            }
            Ok(r.conservation_errors.is_empty() && r.skipped.is_empty())
        }
        Command::LoopDetect { log, sequential } => {
            let l = read_log(&log).with_context(|| format!("reading {}", log.display()))?;
            let records = l.loop_records()?;
            let exec = if sequential { Exec::Sequential } else { Exec::Parallel };
            let cfg = &l.header.config;
            let found = detect_loop_prefixes(&records, &cfg.loop_cfg, cfg.screen, None, exec);
            // Prefix i is the history the detector saw before step i.
            for (i, m) in found.iter().enumerate().take(records.len()) {
                match m {
                    Some(m) => println!(
                        "step {i}: steps {}..{} repeat {}..{}",
                        m.current_start,
                        m.current_start + m.length,
                        m.historical_start,
                        m.historical_start + m.length
                    ),
                    None => println!("step {i}: -"),
                }
            }
            Ok(true)
        }
        Command::Conformance { addr, keep_alive } => {
            let addr = addr.strip_prefix("tcp://").unwrap_or(&addr).to_string();
            let mut env = WireEnvironment::connect(&addr).with_context(|| format!("connecting to {addr}"))?;
            let rep = run_conformance(&mut env, &ConformanceFixture::default());
            print!("{rep}");
            if !keep_alive {
                env.shutdown()?;
            }
            Ok(rep.all_passed())
        }
        Command::Serve { scenario, addr, stdio } => {
            let mut env = SimulatedEnvironment::new(load_scenario(&scenario)?).map_err(anyhow::Error::msg)?;
            if stdio {
                serve_stream(&mut env, BufReader::new(io::stdin()), io::stdout())?;
            } else {
                let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                eprintln!("serving {scenario} on {}", listener.local_addr()?);
                serve_tcp(&mut env, &listener)?;
            }
            Ok(true)
        }
    }
}

fn load_scenario(r: &str) -> Result<Scenario> {
    let text = match r.strip_prefix("builtin:") {
        Some(name) => BUILTIN_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.to_string())
            .with_context(|| format!("no builtin scenario {name:?}"))?,
        None => fs::read_to_string(r).with_context(|| format!("reading {r}"))?,
    };
    Scenario::from_toml(&text).map_err(anyhow::Error::msg)
}

fn collect_logs(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("listing {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            if e.is_dir() {
                collect_logs(&e, out)?;
            } else if e.extension().is_some_and(|x| x == "jsonl") {
                out.push(e);
            }
        }
    } else if p.exists() {
        out.push(p.to_path_buf());
    } else {
        bail!("{} does not exist", p.display());
    }
    Ok(())
}
