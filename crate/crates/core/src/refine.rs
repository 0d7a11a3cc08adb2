//! The generate / test / repair loop for a single task.

use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Task;
use crate::execution::{ExecError, ExecutionOutcome, Executor};
use crate::llm::{ChatClient, LlmError};
use crate::parser::{parse_generation, parse_repair, GenerationArtifact};
use crate::prompting::{PromptBuilder, PromptError, PromptMode, DEFAULT_NUM_TESTS};

pub const DEFAULT_MAX_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Which pipeline components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Plain prompt, single generation.
    Coder,
    /// Reasoning prompt, single generation.
    CoderCot,
    /// Plain prompt with test-driven repair.
    CoderSelfexam,
    /// Reasoning prompt with test-driven repair.
    Codecot,
}

impl LoopMode {
    pub const ALL: [LoopMode; 4] = [LoopMode::Coder, LoopMode::CoderCot, LoopMode::CoderSelfexam, LoopMode::Codecot];

    pub fn uses_cot(self) -> bool {
        matches!(self, LoopMode::CoderCot | LoopMode::Codecot)
    }

    pub fn self_examines(self) -> bool {
        matches!(self, LoopMode::CoderSelfexam | LoopMode::Codecot)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoopMode::Coder => "coder",
            LoopMode::CoderCot => "coder_cot",
            LoopMode::CoderSelfexam => "coder_selfexam",
            LoopMode::Codecot => "codecot",
        }
    }
}

impl fmt::Display for LoopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoopMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LoopMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected coder, coder_cot, coder_selfexam or codecot)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Repair iterations allowed after the initial generation.
    pub max_steps: usize,
    pub mode: LoopMode,
    /// Ask the model to revise its tests along with the code.
    pub refine_tests: bool,
    pub num_tests: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_steps: DEFAULT_MAX_STEPS,
            mode: LoopMode::Codecot,
            refine_tests: false,
            num_tests: DEFAULT_NUM_TESTS,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.num_tests == 0 {
            return Err(LoopError::Config("num_tests must be at least 1".into()));
        }
        if self.refine_tests && !self.mode.self_examines() {
            return Err(LoopError::Config(format!(
                "refine_tests requires a self-examining mode, not `{}`",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepArtifact {
    Parsed(GenerationArtifact),
    ParseError { message: String },
}

impl StepArtifact {
    pub fn artifact(&self) -> Option<&GenerationArtifact> {
        match self {
            StepArtifact::Parsed(a) => Some(a),
            StepArtifact::ParseError { .. } => None,
        }
    }
}

/// One model call and, when it ran, the execution of its result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub fingerprint: String,
    pub artifact: StepArtifact,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    AllTestsPassed,
    StepBudgetExhausted,
    ParseFailure,
    /// Modes without self-examination stop after the first generation.
    GenerationOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub task_id: String,
    pub steps: Vec<TraceStep>,
    /// Code of the last step that parsed; empty if none did.
    pub final_code: String,
    /// Tests of the last step that parsed.
    #[serde(default)]
    pub final_tests: Vec<String>,
    pub terminated_by: Termination,
}

impl RefinementTrace {
    pub fn executions(&self) -> usize {
        self.steps.iter().filter(|s| s.outcome.is_some()).count()
    }
}

/// Drives one task through generation and, in self-examining modes, up to
/// `cfg.max_steps` repairs. Only the generated tests steer the loop; the
/// reference test is never consulted.
pub fn run_task(
    task: &Task,
    cfg: &LoopConfig,
    prompts: &PromptBuilder,
    client: &dyn ChatClient,
    executor: &Executor,
) -> Result<RefinementTrace, LoopError> {
    cfg.validate()?;
    let mode = if cfg.mode.uses_cot() { PromptMode::Cot } else { PromptMode::Plain };
    let conversation = prompts.generation(task, mode, cfg.num_tests)?;
    let fingerprint = client.fingerprint(&conversation);
    let response = client.complete(&conversation)?;
    let artifact = match parse_generation(&response, &task.entry_point) {
        Ok(a) => StepArtifact::Parsed(a),
        Err(e) => StepArtifact::ParseError { message: e.to_string() },
    };
    let mut last_valid = artifact.artifact().cloned();
    let mut steps = vec![TraceStep { fingerprint, artifact, outcome: None }];

    if !cfg.mode.self_examines() {
        let terminated_by = match last_valid {
            Some(_) => Termination::GenerationOnly,
            None => Termination::ParseFailure,
        };
        return Ok(finish(task, steps, last_valid, terminated_by));
    }

    loop {
        let tail = steps.last_mut().expect("at least one step");
        if let StepArtifact::Parsed(artifact) = &tail.artifact {
            if artifact.tests.is_empty() {
                debug!("{}: no generated tests, nothing to examine", task.task_id);
                return Ok(finish(task, steps, last_valid, Termination::StepBudgetExhausted));
            }
            let outcome = executor.run_candidate(task, artifact)?;
            let passed = outcome.is_pass();
            tail.outcome = Some(outcome);
            if passed {
                return Ok(finish(task, steps, last_valid, Termination::AllTestsPassed));
            }
        }

        let repairs_used = steps.len() - 1;
        let tail = steps.last().expect("at least one step");
        if repairs_used >= cfg.max_steps {
            let terminated_by = match tail.artifact {
                StepArtifact::ParseError { .. } => Termination::ParseFailure,
                StepArtifact::Parsed(_) => Termination::StepBudgetExhausted,
            };
            return Ok(finish(task, steps, last_valid, terminated_by));
        }

        let conversation = prompts.repair(task, tail, last_valid.as_ref(), cfg.refine_tests, cfg.num_tests)?;
        let fingerprint = client.fingerprint(&conversation);
        let response = client.complete(&conversation)?;
        let parsed = match &last_valid {
            Some(prior) => parse_repair(&response, &task.entry_point, prior, cfg.refine_tests),
            None => parse_generation(&response, &task.entry_point),
        };
        let artifact = match parsed {
            Ok(a) => {
                last_valid = Some(a.clone());
                StepArtifact::Parsed(a)
            }
            Err(e) => StepArtifact::ParseError { message: e.to_string() },
        };
        debug!("{}: repair {} done", task.task_id, repairs_used + 1);
        steps.push(TraceStep { fingerprint, artifact, outcome: None });
    }
}

fn finish(
    task: &Task,
    steps: Vec<TraceStep>,
    last_valid: Option<GenerationArtifact>,
    terminated_by: Termination,
) -> RefinementTrace {
    let (final_code, final_tests) = last_valid.map(|a| (a.code, a.tests)).unwrap_or_default();
    RefinementTrace {
        task_id: task.task_id.clone(),
        steps,
        final_code,
        final_tests,
        terminated_by,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in LoopMode::ALL {
            assert_eq!(m.as_str().parse::<LoopMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("full".parse::<LoopMode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LoopConfig::default().validate().is_ok());
        let bad = LoopConfig { refine_tests: true, mode: LoopMode::CoderCot, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LoopConfig { num_tests: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
