//! Scoring against hidden reference tests and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Task};
use crate::execution::{ExecError, ExecutionOutcome, Executor, OutcomeClass};
use crate::llm::ChatClient;
use crate::metrics::mean_pass_at_k;
use crate::prompting::PromptBuilder;
use crate::refine::{run_task, LoopConfig, LoopError, LoopMode, RefinementTrace};
use crate::Rate;

pub const NO_CODE_DIAGNOSTIC: &str = "no code was produced";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace refers to unknown task_id `{0}`")]
    UnknownTask(String),
    #[error("empty run: no traces to score")]
    EmptyRun,
    #[error("step sweep needs at least one step count")]
    EmptySteps,
    #[error("step sweep counts must be strictly ascending")]
    StepsNotAscending,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub n_samples: u64,
    pub n_correct: u64,
    /// Reference-run class of the first sample.
    pub final_outcome_class: OutcomeClass,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub diagnostic: String,
}

/// Failure breakdown over tasks whose reference run did not pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub assert_error: u64,
    pub syntax_error: u64,
    pub assert_error_pct: f64,
    pub syntax_error_pct: f64,
}

impl ErrorDistribution {
    pub fn from_counts(assert_error: u64, syntax_error: u64) -> Self {
        let failing = assert_error + syntax_error;
        let pct = |n: u64| if failing == 0 { 0.0 } else { 100.0 * n as f64 / failing as f64 };
        ErrorDistribution {
            assert_error,
            syntax_error,
            assert_error_pct: pct(assert_error),
            syntax_error_pct: pct(syntax_error),
        }
    }

    pub fn failing(&self) -> u64 {
        self.assert_error + self.syntax_error
    }

    pub fn from_classes<'a>(classes: impl IntoIterator<Item = &'a OutcomeClass>) -> Self {
        let (mut a, mut s) = (0, 0);
        for c in classes {
            match c {
                OutcomeClass::Pass => {}
                OutcomeClass::AssertError => a += 1,
                OutcomeClass::SyntaxError => s += 1,
            }
        }
        Self::from_counts(a, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestValidity {
    /// (task_id, generated tests all pass on the canonical solution)
    pub per_task: Vec<(String, bool)>,
    pub valid: u64,
    pub total: u64,
    pub rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub pass_at_1: Rate,
    pub error_distribution: ErrorDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_hash: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<LoopConfig>,
    pub pass_at_k: BTreeMap<u64, Rate>,
    pub error_distribution: ErrorDistribution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_validity: Option<TestValidity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_step_rows: Vec<SweepRow>,
    pub task_results: Vec<TaskResult>,
}

impl EvalReport {
    pub fn pass_at_1(&self) -> Rate {
        self.pass_at_k.get(&1).copied().unwrap_or(0.0)
    }
}

/// Groups traces by task in first-appearance order, checking every task exists.
fn group<'a>(traces: &'a [RefinementTrace], dataset: &'a Dataset) -> Result<Vec<(&'a Task, Vec<&'a RefinementTrace>)>, EvalError> {
    let mut groups: Vec<(&Task, Vec<&RefinementTrace>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for trace in traces {
        let task = dataset
            .get(&trace.task_id)
            .ok_or_else(|| EvalError::UnknownTask(trace.task_id.clone()))?;
        match index.get(trace.task_id.as_str()) {
            Some(&i) => groups[i].1.push(trace),
            None => {
                index.insert(&trace.task_id, groups.len());
                groups.push((task, vec![trace]));
            }
        }
    }
    Ok(groups)
}

fn reference_outcome(executor: &Executor, task: &Task, trace: &RefinementTrace) -> Result<ExecutionOutcome, ExecError> {
    if trace.final_code.trim().is_empty() {
        return Ok(ExecutionOutcome::other_error(NO_CODE_DIAGNOSTIC));
    }
    executor.run_reference(task, &trace.final_code)
}

/// Scores final candidates against the reference tests. Several traces for the
/// same task are treated as independent samples; pass@k is reported for every
/// requested `k` that all tasks have enough samples for, and pass@1 always.
pub fn score_run(
    traces: &[RefinementTrace],
    dataset: &Dataset,
    executor: &Executor,
    ks: &[u64],
) -> Result<EvalReport, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let groups = group(traces, dataset)?;
    let task_results = groups
        .par_iter()
        .map(|(task, samples)| {
            let outcomes = samples
                .iter()
                .map(|t| reference_outcome(executor, task, t))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TaskResult {
                task_id: task.task_id.clone(),
                n_samples: outcomes.len() as u64,
                n_correct: outcomes.iter().filter(|o| o.is_pass()).count() as u64,
                final_outcome_class: outcomes[0].class,
                diagnostic: outcomes[0].diagnostic.clone(),
            })
        })
        .collect::<Result<Vec<_>, ExecError>>()?;

    let counts: Vec<(u64, u64)> = task_results.iter().map(|r| (r.n_samples, r.n_correct)).collect();
    let mut pass_at_k = BTreeMap::new();
    for k in std::iter::once(1).chain(ks.iter().copied()) {
        if let Some(rate) = mean_pass_at_k::<Rate>(&counts, k) {
            pass_at_k.insert(k, rate);
        }
    }
    let error_distribution = ErrorDistribution::from_classes(task_results.iter().map(|r| &r.final_outcome_class));
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        dataset_hash: dataset.source_hash.clone(),
        model: String::new(),
        config: None,
        pass_at_k,
        error_distribution,
        test_validity: None,
        per_step_rows: Vec::new(),
        task_results,
    })
}

/// Runs each task's final generated tests against its canonical solution.
/// Tasks without generated tests count as invalid.
pub fn validate_tests(traces: &[RefinementTrace], dataset: &Dataset, executor: &Executor) -> Result<TestValidity, EvalError> {
    let groups = group(traces, dataset)?;
    let per_task = groups
        .par_iter()
        .map(|(task, samples)| {
            let tests = &samples[0].final_tests;
            let valid = !tests.is_empty() && executor.run_tests_on_canonical(task, tests)?.is_pass();
            Ok((task.task_id.clone(), valid))
        })
        .collect::<Result<Vec<_>, ExecError>>()?;
    let total = per_task.len() as u64;
    let valid = per_task.iter().filter(|(_, v)| *v).count() as u64;
    Ok(TestValidity {
        per_task,
        valid,
        total,
        rate: if total == 0 { 0.0 } else { valid as Rate / total as Rate },
    })
}

/// Runs every task of `dataset` under `cfg`, in parallel, preserving task order.
pub fn run_dataset(
    dataset: &Dataset,
    cfg: &LoopConfig,
    prompts: &PromptBuilder,
    client: &dyn ChatClient,
    executor: &Executor,
) -> Result<Vec<RefinementTrace>, LoopError> {
    dataset
        .tasks
        .par_iter()
        .map(|task| run_task(task, cfg, prompts, client, executor))
        .collect()
}

/// One full run and scoring per step budget.
pub fn sweep_steps(
    dataset: &Dataset,
    base: &LoopConfig,
    steps: &[usize],
    prompts: &PromptBuilder,
    client: &dyn ChatClient,
    executor: &Executor,
) -> Result<Vec<SweepRow>, EvalError> {
    if steps.is_empty() {
        return Err(EvalError::EmptySteps);
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::StepsNotAscending);
    }
    steps
        .iter()
        .map(|&max_steps| {
            let cfg = LoopConfig { max_steps, ..*base };
            let traces = run_dataset(dataset, &cfg, prompts, client, executor)?;
            let report = score_run(&traces, dataset, executor, &[])?;
            Ok(SweepRow {
                steps: max_steps,
                pass_at_1: report.pass_at_1(),
                error_distribution: report.error_distribution,
            })
        })
        .collect()
}

/// One row of a component ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: LoopMode,
    pub pass_at_1: Rate,
    pub executions: usize,
    pub error_distribution: ErrorDistribution,
}

fn pct(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r[i].chars().count()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.iter().map(|h| h.to_string()).collect());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.clone()));
        out.push('\n');
    }
    out
}

pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "dataset: {} ({} tasks)", report.dataset, report.task_results.len());
    if !report.model.is_empty() {
        let _ = writeln!(out, "model:   {}", report.model);
    }
    if let Some(cfg) = &report.config {
        let _ = writeln!(
            out,
            "config:  mode={} max_steps={} num_tests={} refine_tests={}",
            cfg.mode, cfg.max_steps, cfg.num_tests, cfg.refine_tests
        );
    }
    out.push('\n');
    let rows: Vec<Vec<String>> = report
        .pass_at_k
        .iter()
        .map(|(k, v)| vec![format!("pass@{k}"), pct(*v)])
        .collect();
    out.push_str(&table(&["metric", "value"], &rows));
    out.push('\n');
    let d = &report.error_distribution;
    out.push_str(&table(
        &["failing tasks", "AssertError", "SyntaxError"],
        &[vec![
            d.failing().to_string(),
            format!("{:.1}%", d.assert_error_pct),
            format!("{:.1}%", d.syntax_error_pct),
        ]],
    ));
    if let Some(v) = &report.test_validity {
        out.push('\n');
        let _ = writeln!(out, "generated tests valid on canonical solution: {}/{} ({})", v.valid, v.total, pct(v.rate));
    }
    if !report.per_step_rows.is_empty() {
        out.push('\n');
        out.push_str(&render_sweep(&report.per_step_rows));
    }
    out
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.steps.to_string(),
                pct(r.pass_at_1),
                format!("{:.1}%", r.error_distribution.assert_error_pct),
                format!("{:.1}%", r.error_distribution.syntax_error_pct),
            ]
        })
        .collect();
    table(&["steps", "pass@1", "AssertError", "SyntaxError"], &body)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.mode.to_string(), pct(r.pass_at_1), r.executions.to_string()])
        .collect();
    table(&["mode", "pass@1", "executions"], &body)
}
