//! Orchestration kernel for computer-using agents.

pub mod actions;
pub mod backends;
pub mod harness;
pub mod loop_detect;
pub mod orchestrator;
pub mod prompts;
pub mod rma;
pub mod tools;
pub mod trajectory;
pub mod vision;
