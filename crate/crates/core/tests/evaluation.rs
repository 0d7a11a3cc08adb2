mod common;

use common::*;
use cotloop::evaluator::{score_run, sweep_steps, validate_tests, EvalError};
use cotloop::execution::OutcomeClass;
use cotloop::prompting::PromptBuilder;
use cotloop::refine::{LoopConfig, RefinementTrace, Termination};

fn trace(i: usize, code: &str, tests: Vec<String>) -> RefinementTrace {
    RefinementTrace {
        task_id: task(i).task_id,
        steps: Vec::new(),
        final_code: code.to_string(),
        final_tests: tests,
        terminated_by: Termination::AllTestsPassed,
    }
}

fn good(i: usize) -> String {
    format!("def {}(x):\n    return x\n", entry_point(i))
}

fn bad(i: usize) -> String {
    format!("def {}(x):\n    return x + 1  {BROKEN}\n", entry_point(i))
}

#[test]
fn scores_seven_of_ten() {
    let (ex, backend) = fake_executor();
    let traces: Vec<_> = (0..10).map(|i| trace(i, &if i < 7 { good(i) } else { bad(i) }, vec![])).collect();
    let report = score_run(&traces, &dataset(10), &ex, &[1, 5]).unwrap();
    assert_eq!(report.pass_at_1(), 0.7);
    // one sample per task: pass@5 is undefined and omitted
    assert!(!report.pass_at_k.contains_key(&5));
    assert_eq!(report.error_distribution.assert_error, 3);
    assert_eq!(report.task_results.len(), 10);
    // the reference test, not the generated one, is what ran
    let runs = backend.runs.lock().unwrap();
    assert!(runs.iter().all(|p| p.test_statements.iter().any(|t| t.contains("check("))));
}

#[test]
fn empty_final_code_counts_as_other_error_without_running() {
    let (ex, _) = fake_executor();
    let report = score_run(&[trace(0, "", vec![])], &dataset(1), &ex, &[]).unwrap();
    assert_eq!(report.task_results[0].final_outcome_class, OutcomeClass::SyntaxError);
    assert_eq!(ex.executions(), 0);
}

#[test]
fn rejects_empty_runs_and_unknown_tasks() {
    let (ex, _) = fake_executor();
    assert!(matches!(score_run(&[], &dataset(2), &ex, &[]), Err(EvalError::EmptyRun)));
    let mut stray = trace(0, &good(0), vec![]);
    stray.task_id = "Elsewhere/9".into();
    assert!(matches!(score_run(&[stray], &dataset(2), &ex, &[]), Err(EvalError::UnknownTask(id)) if id == "Elsewhere/9"));
}

#[test]
fn test_validity_eight_of_ten() {
    let (ex, _) = fake_executor();
    let traces: Vec<_> = (0..10)
        .map(|i| {
            let ep = entry_point(i);
            let mut tests = vec![format!("assert {ep}(1) == 1")];
            if i >= 8 {
                tests.push(format!("assert {ep}(2) == 3  # WRONG"));
            }
            trace(i, &good(i), tests)
        })
        .collect();
    let validity = validate_tests(&traces, &dataset(10), &ex).unwrap();
    assert_eq!((validity.valid, validity.total), (8, 10));
    assert_eq!(validity.rate, 0.8);
}

#[test]
fn missing_tests_are_invalid() {
    let (ex, _) = fake_executor();
    let validity = validate_tests(&[trace(0, &good(0), vec![])], &dataset(1), &ex).unwrap();
    assert_eq!(validity.valid, 0);
}

#[test]
fn sweep_rejects_bad_step_lists() {
    let (ex, _) = fake_executor();
    let client = ScriptedClient::new(vec![0]);
    let prompts = PromptBuilder::default();
    let cfg = LoopConfig::default();
    assert!(matches!(sweep_steps(&dataset(1), &cfg, &[], &prompts, &client, &ex), Err(EvalError::EmptySteps)));
    assert!(matches!(
        sweep_steps(&dataset(1), &cfg, &[2, 1], &prompts, &client, &ex),
        Err(EvalError::StepsNotAscending)
    ));
    assert_eq!(client.total_calls(), 0);
}
