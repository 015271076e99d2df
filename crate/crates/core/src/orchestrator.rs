//! The decision loop: context assembly under the image budget, the
//! orchestrator call, grounding, dispatch to the environment or a tool
//! agent, and the per-step RMA pass.

use std::sync::Arc;

use thiserror::Error;

use crate::actions::{parse_action_block, Action, ActionKind, ActionSet, GroundedAction, ScreenGeometry};
use crate::backends::{BackendError, Backends, ChatRequest, Environment, Message, Metered, Part, Role, SandboxFactory};
use crate::loop_detect::{LoopConfig, LoopDetector};
use crate::prompts;
use crate::rma::{reflect, summarize_step, zoom_crop, AuxiliarySignals, ReflectInput, ReflectionMessage, RmaConfig, RmaError, CROP_RADIUS};
use crate::tools::{
    code_task, ground_action, search, CodeOutcome, CoderConfig, GroundingConfig, GroundingError, SearchOutcome,
    SearcherConfig,
};
use crate::trajectory::{long_term_view, short_term_window, LogConfig, Observation, Outcome, Phase, Step, Trajectory};
use crate::vision::FeatureMetrics;

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// Short-term window in turns, current one included.
    pub k: usize,
    pub max_images: usize,
    pub rma_max_images: usize,
    pub max_steps: usize,
    pub temperature: f64,
    pub os: String,
    pub run_index: usize,
    pub loop_cfg: LoopConfig,
    pub searcher: SearcherConfig,
    pub coder: CoderConfig,
    pub grounding_temperature: f64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            k: 8,
            max_images: 8,
            rma_max_images: 8,
            max_steps: 50,
            temperature: 0.1,
            os: "Ubuntu".into(),
            run_index: 0,
            loop_cfg: LoopConfig::default(),
            searcher: SearcherConfig::default(),
            coder: CoderConfig::default(),
            grounding_temperature: 0.0,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.max_images < 2 {
            return bad("max_images must be >= 2");
        }
        if self.rma_max_images < 1 {
            return bad("rma_max_images must be >= 1");
        }
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must be within [0, 2]");
        }
        self.loop_cfg
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    pub fn log_config(&self, screen: ScreenGeometry) -> LogConfig {
        LogConfig {
            k: self.k,
            max_images: self.max_images,
            rma_max_images: self.rma_max_images,
            max_steps: self.max_steps,
            loop_cfg: self.loop_cfg,
            screen,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("orchestrator output unusable: {0}")]
    Parse(String),
}

/// The orchestrator's input for one step.
#[derive(Debug, Clone)]
pub struct AssembledContext {
    pub system: String,
    pub parts: Vec<Part>,
    pub tutorials: usize,
    pub has_reflection: bool,
    pub history_steps: usize,
}

impl AssembledContext {
    pub fn image_hashes(&self) -> Vec<String> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Image(i) => Some(i.sha256.clone()),
                Part::Text(_) => None,
            })
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, Part::Image(_))).count()
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn request(&self, session: &str, temperature: f64) -> ChatRequest {
        ChatRequest::new(
            Role::Orchestrator,
            session,
            temperature,
            vec![Message::system(self.system.clone()), Message::user(self.parts.clone())],
        )
    }
}

fn history_text(s: &Step) -> String {
    let mut t = format!("Step {}:\n(Thought) {}\n(Action) {}\n", s.index, s.thought.trim(), s.action);
    if let Some(n) = &s.note {
        t.push_str(&format!("(Result) {n}\n"));
    }
    t
}

/// Builds the orchestrator context: tutorials, the last `k - 1` steps with
/// screenshots attached newest-first while the budget allows, the reflection,
/// then the current screenshot.
pub fn assemble_context(
    traj: &Trajectory,
    reflection: Option<&ReflectionMessage>,
    current: &Observation,
    cfg: &OrchestratorConfig,
) -> AssembledContext {
    let system = prompts::fill(
        prompts::ORCHESTRATOR,
        &[
            ("TASK_DESCRIPTION", &traj.task_instruction),
            ("CURRENT_OS", &cfg.os),
            ("ACTION_API", prompts::ACTION_API),
        ],
    );
    let window = short_term_window(traj, cfg.k);
    let history_budget = cfg.max_images.saturating_sub(1);
    let first_with_image = window.len().saturating_sub(history_budget);
    let mut parts = Vec::new();
    if let Some(t) = traj.tutorial_text() {
        parts.push(Part::text(format!("Tutorial found earlier in this task:\n{t}")));
    }
    if !window.is_empty() {
        parts.push(Part::text("Recent turns:"));
    }
    for (pos, s) in window.iter().enumerate() {
        parts.push(Part::text(history_text(s)));
        if pos >= first_with_image {
            parts.push(Part::image(&s.observation));
        }
    }
    if let Some(r) = reflection {
        parts.push(Part::text(format!("Reflection:\n{}", r.render())));
    }
    parts.push(Part::text("Current screenshot:"));
    parts.push(Part::image(current));
    AssembledContext {
        system,
        parts,
        tutorials: traj.tutorials.len(),
        has_reflection: reflection.is_some(),
        history_steps: window.len(),
    }
}

pub const SECTION_HEADERS: [&str; 4] = [
    "(Previous action verification)",
    "(Screenshot Analysis)",
    "(Next Action)",
    "(Grounded Action)",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecisionSections {
    pub verification: String,
    pub analysis: String,
    pub next_action: String,
    pub grounded: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub thought: String,
    pub action: Action,
    pub sections: DecisionSections,
    pub raw: String,
    pub warnings: Vec<String>,
}

/// Splits a reply at the four section headers (case-insensitive). The
/// grounded-action section is required.
pub fn split_sections(text: &str) -> Result<DecisionSections, String> {
    let lower = text.to_lowercase();
    let mut found: Vec<(usize, usize, usize)> = SECTION_HEADERS
        .iter()
        .enumerate()
        .filter_map(|(i, h)| lower.find(&h.to_lowercase()).map(|p| (p, p + h.len(), i)))
        .collect();
    found.sort();
    let mut out = DecisionSections::default();
    for (n, &(_, body_start, which)) in found.iter().enumerate() {
        let end = found.get(n + 1).map_or(text.len(), |x| x.0);
        let body = text[body_start..end].trim().to_string();
        match which {
            0 => out.verification = body,
            1 => out.analysis = body,
            2 => out.next_action = body,
            _ => out.grounded = body,
        }
    }
    if !found.iter().any(|f| f.2 == 3) {
        return Err("missing (Grounded Action) section".into());
    }
    Ok(out)
}

pub fn parse_decision(text: &str) -> Result<Decision, String> {
    let sections = split_sections(text)?;
    let (action, warnings) = parse_action_block(&sections.grounded).map_err(|e| e.to_string())?;
    action
        .validate(&ActionSet::all())
        .map_err(|v| format!("invalid action: {v:?}"))?;
    let thought = if sections.next_action.is_empty() {
        sections.analysis.clone()
    } else {
        sections.next_action.clone()
    };
    Ok(Decision {
        thought,
        action,
        sections,
        raw: text.to_string(),
        warnings,
    })
}

/// One orchestrator call with a single format retry.
pub fn decide(
    ctx: &AssembledContext,
    backends: &Backends,
    session: &str,
    temperature: f64,
) -> Result<Metered<Decision>, OrchestratorError> {
    let mut req = ctx.request(session, temperature);
    let mut out = Metered::<()>::default();
    for attempt in 0..2 {
        out.note_request(&req);
        let resp = backends.chat(&req)?;
        out.charge(Role::Orchestrator, resp.usage);
        match parse_decision(&resp.text) {
            Ok(mut d) => {
                if attempt > 0 {
                    d.warnings.push("orchestrator reply needed a format retry".into());
                }
                out.warnings.extend(d.warnings.iter().cloned());
                return Ok(out.with(d));
            }
            Err(e) if attempt == 0 => {
                req.messages.push(Message::assistant(resp.text));
                req.messages.push(Message::user(vec![Part::text(prompts::fill(
                    prompts::FORMAT_REMINDER,
                    &[("error", &e)],
                ))]));
            }
            Err(e) => return Err(OrchestratorError::Parse(e)),
        }
    }
    unreachable!("loop returns on the second attempt")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeTask {
    pub id: String,
    pub instruction: String,
}

/// What an episode needs besides its configuration.
pub struct EpisodeDeps<'a> {
    pub env: &'a mut dyn Environment,
    pub sandbox: Option<&'a dyn SandboxFactory>,
    pub backends: &'a Backends,
    /// Feature-computation counters shared with the loop detector.
    pub metrics: Option<Arc<FeatureMetrics>>,
}

fn fold<T>(step: &mut Step, m: Metered<T>) -> T {
    for (r, t) in m.tokens {
        step.add_tokens(r, t);
    }
    step.warnings.extend(m.warnings);
    m.value
}

/// Runs one episode to a terminal outcome. Errors end up in the returned
/// trajectory (`Outcome::Aborted` plus a reason), never as a panic.
pub fn run_episode(task: &EpisodeTask, deps: EpisodeDeps<'_>, cfg: &OrchestratorConfig) -> Trajectory {
    let EpisodeDeps {
        env,
        sandbox,
        backends,
        metrics,
    } = deps;
    let mut traj = Trajectory::new(task.id.clone(), task.instruction.clone(), env.screen());
    traj.env_handle = env.handle_id();
    traj.run_index = cfg.run_index;
    traj.temperature = cfg.temperature;
    if let Err(e) = cfg.validate() {
        traj.close(Outcome::Aborted, Some(e.to_string()));
        return traj;
    }
    let session = format!("{}/run-{}", task.id, cfg.run_index);
    let rma_cfg = RmaConfig {
        session: format!("{session}/rma"),
        temperature: cfg.temperature,
        max_images: cfg.rma_max_images,
    };
    let gcfg = GroundingConfig {
        session: format!("{session}/grounding"),
        temperature: cfg.grounding_temperature,
    };
    let searcher_cfg = SearcherConfig {
        session: format!("{session}/searcher"),
        ..cfg.searcher.clone()
    };
    let coder_cfg = CoderConfig {
        session: format!("{session}/coder"),
        ..cfg.coder.clone()
    };
    let mut detector = LoopDetector::new(cfg.loop_cfg, env.screen()).expect("validated above");
    if let Some(m) = metrics {
        detector = detector.with_metrics(m);
    }

    let mut obs = match env.reset(&task.id) {
        Ok(o) => o,
        Err(e) => {
            traj.close(Outcome::Aborted, Some(format!("environment reset failed: {e}")));
            return traj;
        }
    };
    let mut coder_pending = false;

    for i in 0..cfg.max_steps {
        let current = obs.with_index(i);
        // Collected before the step exists; moved into it once decided.
        let mut pre = Step::new(i, current.clone(), Action::Wait { seconds: 0.0 });

        let mut gui_failure = None;
        if i >= 1 && traj.steps[i - 1].was_dispatched() {
            let prev = &traj.steps[i - 1];
            let crop = if prev.action.kind().is_coordinate_dependent() {
                prev.points()
                    .and_then(|p| p.first())
                    .and_then(|&p| zoom_crop(&prev.observation, p, CROP_RADIUS).ok())
            } else {
                None
            };
            match summarize_step(&prev.raw_output, &prev.observation, &current, crop.as_ref(), backends, &rma_cfg) {
                Ok(m) => {
                    let s = fold(&mut pre, m);
                    gui_failure = Some(!s.success);
                    traj.steps[i - 1].summary = Some(s);
                }
                Err(e) => {
                    traj.close(Outcome::Aborted, Some(format!("step summary failed: {e}")));
                    break;
                }
            }
            pre.phases.push(Phase::Summarize);
        }

        let loop_match = detector.detect(&traj.steps);
        pre.phases.push(Phase::LoopDetect);

        let signals = AuxiliarySignals {
            gui_failure,
            loop_match,
            coder_pending_verification: coder_pending,
        };
        coder_pending = false;
        let mut reflection = None;
        if i >= 1 {
            let long = long_term_view(&traj);
            let instruction = traj.task_instruction.clone();
            let prev_output = traj.steps[i - 1].raw_output.clone();
            let input = ReflectInput {
                instruction: &instruction,
                prev_output: &prev_output,
                latest: &current,
                long_term: &long,
                signals: &signals,
            };
            match reflect(&input, &mut traj.knowledge, i, backends, &rma_cfg) {
                Ok(m) => {
                    pre.rma_image_refs = m.requests.last().cloned();
                    let v = fold(&mut pre, m);
                    pre.milestone = v.milestone;
                    reflection = Some(v.reflection);
                }
                Err(RmaError::Backend(e)) => {
                    traj.close(Outcome::Aborted, Some(format!("reflection failed: {e}")));
                    break;
                }
                Err(e) => {
                    tracing::warn!(step = i, error = %e, "reflection unusable after retry");
                    pre.warnings.push(format!("reflection unusable: {e}"));
                    pre.reflection_error = Some(e.to_string());
                }
            }
            pre.phases.push(Phase::Reflect);
            pre.signals = Some(signals);
        }
        if i == 0 {
            pre.milestone = true;
        }

        let ctx = assemble_context(&traj, reflection.as_ref(), &current, cfg);
        pre.context_image_refs = ctx.image_hashes();
        pre.tutorials_in_context = ctx.tutorials;
        let decision = match decide(&ctx, backends, &format!("{session}/orchestrator"), cfg.temperature) {
            Ok(m) => fold(&mut pre, m),
            Err(e) => {
                traj.close(Outcome::Aborted, Some(e.to_string()));
                break;
            }
        };
        pre.phases.push(Phase::Decide);
        pre.reflection = reflection;
        pre.thought = decision.thought;
        pre.raw_output = decision.raw;
        pre.action = decision.action.clone();
        let mut step = pre;
        let mut abort: Option<String> = None;

        match &decision.action {
            Action::Done | Action::Fail => {}
            Action::CallSearchAgent { query } => match sandbox {
                None => step.note = Some("search agent unavailable in this environment".into()),
                Some(f) => {
                    let (outcome, record) = fold(&mut step, search(query, &current, f, backends, &searcher_cfg));
                    step.tool = Some(record);
                    match outcome {
                        SearchOutcome::Done { tutorial } => {
                            step.note = Some(format!(
                                "search agent DONE: tutorial with {} steps attached",
                                tutorial.steps.len()
                            ));
                            traj.attach_tutorial(tutorial);
                        }
                        SearchOutcome::Fail { hint } => step.note = Some(format!("search agent FAIL: {hint}")),
                    }
                }
            },
            Action::CallCodeAgent { task: sub } => {
                let (outcome, record) = fold(&mut step, code_task(sub, env, backends, &coder_cfg));
                step.tool = Some(record);
                step.note = Some(match outcome {
                    CodeOutcome::Done {
                        synopsis,
                        verify_instructions,
                    } => {
                        coder_pending = true;
                        format!("code agent DONE: {synopsis} Verify: {verify_instructions}")
                    }
                    CodeOutcome::Fail { reason } => format!("code agent FAIL: {reason}"),
                    CodeOutcome::BudgetExhausted { .. } => "code agent BUDGET_EXHAUSTED".to_string(),
                });
            }
            action => {
                let grounded = if action.kind().is_coordinate_dependent() {
                    step.phases.push(Phase::Ground);
                    match ground_action(action, &current, env, backends, &gcfg) {
                        Ok(m) => Some(fold(&mut step, m)),
                        Err(GroundingError::Backend(e)) => {
                            abort = Some(format!("grounding failed: {e}"));
                            None
                        }
                        Err(e) => {
                            step.note = Some(format!("grounding failed: {e}; action not executed"));
                            None
                        }
                    }
                } else {
                    Some(GroundedAction::ungrounded(action.clone()))
                };
                if let Some(ga) = grounded {
                    step.grounded = Some(ga.clone());
                    step.phases.push(Phase::Dispatch);
                    match env.execute(&ga) {
                        Ok(o) => obs = o,
                        Err(e) => {
                            step.note = Some(format!("environment error: {e}"));
                            abort = Some(format!("environment error: {e}"));
                        }
                    }
                }
            }
        }
        if matches!(decision.action.kind(), ActionKind::CallSearchAgent | ActionKind::CallCodeAgent) {
            match env.observe() {
                Ok(o) => obs = o,
                Err(e) => abort = Some(format!("environment error: {e}")),
            }
        }
        traj.append_step(step).expect("index and state maintained by the loop");
        if let Some(reason) = abort {
            traj.close(Outcome::Aborted, Some(reason));
        }
        if traj.outcome.is_terminal() {
            break;
        }
    }
    traj.close(Outcome::BudgetExhausted, None);
    traj.success = env.task_success();
    traj
}

#[cfg(test)]
mod tests {
    use image::{Rgb, RgbImage};

    use super::*;
    use crate::trajectory::Tutorial;

    fn obs(i: usize) -> Observation {
        Observation::new(RgbImage::from_pixel(8, 8, Rgb([i as u8, 3, 3])), i)
    }

    fn traj(n: usize) -> Trajectory {
        let mut t = Trajectory::new("t", "do it", ScreenGeometry::default());
        for i in 0..n {
            let mut s = Step::new(i, obs(i), Action::hotkey(["ctrl", "s"]));
            s.thought = format!("thought {i}");
            t.append_step(s).unwrap();
        }
        t
    }

    #[test]
    fn budget_counting_twelve_steps() {
        let t = traj(12);
        let ctx = assemble_context(&t, None, &obs(12), &OrchestratorConfig::default());
        assert_eq!(ctx.history_steps, 7);
        assert_eq!(ctx.image_count(), 8);
        assert_eq!(ctx.image_hashes().last().unwrap(), obs(12).content_hash());
        assert_eq!(ctx.text().matches("(Thought)").count(), 7);
    }

    #[test]
    fn newest_images_kept_under_tight_budget() {
        let t = traj(12);
        let cfg = OrchestratorConfig {
            max_images: 3,
            ..Default::default()
        };
        let ctx = assemble_context(&t, None, &obs(12), &cfg);
        let want: Vec<String> = [10, 11, 12].iter().map(|&i| obs(i).content_hash().to_string()).collect();
        assert_eq!(ctx.image_hashes(), want);
        assert_eq!(ctx.history_steps, 7);
    }

    #[test]
    fn first_step_context() {
        let t = traj(0);
        let ctx = assemble_context(&t, None, &obs(0), &OrchestratorConfig::default());
        assert_eq!(ctx.image_count(), 1);
        assert!(!ctx.has_reflection);
        assert!(!ctx.text().contains("Reflection"));
    }

    #[test]
    fn tutorial_and_reflection_placement() {
        let mut t = traj(2);
        t.attach_tutorial(Tutorial {
            query: "q".into(),
            steps: vec!["open menu".into()],
            source_urls: vec![],
        });
        let r = ReflectionMessage::new(crate::rma::ReflectionState::OnTrack, None, "fine").unwrap();
        let ctx = assemble_context(&t, Some(&r), &obs(2), &OrchestratorConfig::default());
        assert_eq!(ctx.tutorials, 1);
        let n = ctx.parts.len();
        assert!(matches!(&ctx.parts[n - 3], Part::Text(s) if s.contains("You are on track.")));
        assert!(matches!(&ctx.parts[0], Part::Text(s) if s.contains("open menu")));
    }

    #[test]
    fn decision_parsing() {
        let text = "(Previous action verification)\nok\n(Screenshot Analysis)\nan editor\n(Next Action)\nsave\n(Grounded Action)\n```python\nagent.hotkey(['ctrl', 's'])\n```";
        let d = parse_decision(text).unwrap();
        assert_eq!(d.action, Action::hotkey(["ctrl", "s"]));
        assert_eq!(d.thought, "save");
        assert_eq!(d.sections.analysis, "an editor");
        assert!(parse_decision("(Next Action)\nsave\n```python\nagent.done()\n```").is_err());
        assert!(parse_decision("(Grounded Action)\n```python\nagent.click(\"x\", 0)\n```").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OrchestratorConfig::default().validate().is_ok());
        for c in [
            OrchestratorConfig { k: 0, ..Default::default() },
            OrchestratorConfig { max_images: 1, ..Default::default() },
            OrchestratorConfig { max_steps: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
