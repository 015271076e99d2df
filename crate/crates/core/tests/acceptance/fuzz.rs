//! Randomized episodes: a small state machine desktop driven by backends
//! whose replies are drawn from a seeded RNG.

use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cua_kernel::backends::sim::{Scenario, SimulatedEnvironment};
use cua_kernel::backends::{Backends, Reply, Role, SandboxFactory, ScriptedBackend};
use cua_kernel::orchestrator::{run_episode, EpisodeDeps, EpisodeTask, OrchestratorConfig};
use cua_kernel::trajectory::Trajectory;

pub const FUZZ_SCENARIO: &str = r#"
name = "fuzz"
screen = { width = 320, height = 180 }
initial = "a"
success_states = ["c"]

[states.a]
layout = ["0123", "4567"]
transitions = [{ on = { kind = "click" }, to = "b" }, { on = { kind = "hotkey" }, to = "c" }]

[states.b]
layout = ["89ab", "cdef"]
transitions = [{ on = { kind = "click" }, to = "a" }, { on = { kind = "type" }, to = "c" }]

[states.c]
layout = ["1111", "2222"]
transitions = [{ on = { kind = "scroll" }, to = "a" }]

[search]
results = "r"
[search.pages.r]
url = "https://search.local/r"
layout = ["33", "44"]
links = [{ region = { x = 0, y = 0, w = 960, h = 540 }, to = "g" }]
[search.pages.g]
url = "https://docs.local/g"
layout = ["55", "66"]
"#;

fn orchestrator_reply(rng: &mut ChaCha8Rng) -> String {
    let call = match rng.gen_range(0..100) {
        0..=29 => format!("agent.click(\"tile {}\", 1, \"left\")", rng.gen_range(0..4)),
        30..=39 => "agent.type(\"the text box\", \"hello\", False, True)".to_string(),
        40..=47 => format!("agent.scroll(\"the page\", {})", [-3, 3][rng.gen_range(0..2)]),
        48..=55 => "agent.hotkey(['ctrl', 's'])".to_string(),
        56..=63 => "agent.wait(1)".to_string(),
        64..=73 => format!("agent.call_search_agent(\"how to finish step {}\")", rng.gen_range(0..3)),
        74..=81 => "agent.call_code_agent(\"list the files\")".to_string(),
        82..=87 => "agent.open(\"editor\")".to_string(),
        88..=90 => "agent.done()".to_string(),
        91..=92 => "agent.fail()".to_string(),
        _ => return "I am not sure what to do next.".to_string(),
    };
    format!(
        "(Previous action verification)\nok\n(Screenshot Analysis)\ntiles\n(Next Action)\nact\n(Grounded Action)\n```python\n{call}\n```"
    )
}

fn reflector_reply(rng: &mut ChaCha8Rng) -> String {
    let reflection = match rng.gen_range(0..10) {
        0..=3 => "You are on track. Moving along.",
        4 => "The trajectory is not going according to plan. GUI Operation Error: nothing changed.",
        5 => "The trajectory is not going according to plan. Lack of Tutorial: circling.",
        6 => "The trajectory is not going according to plan. Code Error: wrong output.",
        7 => "The trajectory is not going according to plan. Other Error: unclear.",
        8 => "Task completed.",
        _ => return "no verdict this time".to_string(),
    };
    let milestone = rng.gen_bool(0.3);
    format!(
        "```json\n{}\n```",
        serde_json::json!({"reflection": reflection, "milestone": milestone, "knowledge": "", "recalled_knowledge": null})
    )
}

fn searcher_reply(rng: &mut ChaCha8Rng) -> String {
    let call = match rng.gen_range(0..10) {
        0..=4 => "agent.click(\"the first result\", 1, \"left\")",
        5..=6 => "agent.save_to_tutorial_notes(\"1. Press the big button.\")",
        7..=8 => "agent.done(\"1. Press the big button.\\n2. Confirm.\")",
        _ => "agent.fail(\"nothing relevant\")",
    };
    format!("```python\n{call}\n```")
}

/// One randomized episode. The returned config is the one it ran under.
pub fn episode(seed: u64) -> (Trajectory, Arc<ScriptedBackend>, OrchestratorConfig) {
    let rng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed)));
    let draw = |f: fn(&mut ChaCha8Rng) -> String| {
        let rng = rng.clone();
        move |_: &cua_kernel::backends::ChatRequest, _: usize| Some(Reply::text(f(&mut rng.lock().unwrap())))
    };
    let backend = ScriptedBackend::new()
        .fixed_tokens(100, 10)
        .respond(Role::Orchestrator, draw(orchestrator_reply))
        .respond(Role::Reflector, draw(reflector_reply))
        .respond(Role::Searcher, draw(searcher_reply))
        .respond(
            Role::Grounder,
            draw(|r| {
                if r.gen_bool(0.05) {
                    "NOT_FOUND".into()
                } else {
                    format!("({}, {})", r.gen_range(0..320), r.gen_range(0..180))
                }
            }),
        )
        .respond(
            Role::Summarizer,
            draw(|r| format!("Summary: something happened.\nSuccess: {}", r.gen_bool(0.7))),
        )
        .respond(Role::Coder, {
            let rng = rng.clone();
            move |req, _| {
                let text = if req.session.ends_with("/summary") {
                    "Synopsis: listed files.\nVerification: check the file panel.".to_string()
                } else {
                    let opts = ["```bash\nls\n```", "```\nDONE\n```", "```\nFAIL\n```"];
                    opts.choose(&mut *rng.lock().unwrap()).unwrap().to_string()
                };
                Some(Reply::text(text))
            }
        });
    let backend = Arc::new(backend);
    let cfg = {
        let mut r = rng.lock().unwrap();
        OrchestratorConfig {
            k: r.gen_range(1..=12),
            max_images: r.gen_range(2..=8),
            rma_max_images: r.gen_range(1..=8),
            max_steps: r.gen_range(5..=30),
            ..Default::default()
        }
    };
    let sc = Scenario::from_toml(FUZZ_SCENARIO).unwrap();
    let factory = sc.sandbox_factory().unwrap();
    let mut env = SimulatedEnvironment::new(sc).unwrap();
    let traj = run_episode(
        &EpisodeTask {
            id: format!("fuzz-{seed}"),
            instruction: "Reach the striped screen.".into(),
        },
        EpisodeDeps {
            env: &mut env,
            sandbox: Some(&factory as &dyn SandboxFactory),
            backends: &Backends::uniform(backend.clone()),
            metrics: None,
        },
        &cfg,
    );
    (traj, backend, cfg)
}
