mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Duration;

use common::{dataset, fixture_path, ScriptedClient};
use cotloop::execution::{Executor, ExecutorSpec, SubprocessBackend};
use cotloop::llm::{Cassette, ModelConfig, RecordingClient};
use cotloop::pipeline::{load_traces, run_pipeline, ClientMode, RunManifest};
use cotloop::prompting::PromptBuilder;
use cotloop::refine::LoopConfig;
use cotloop::{Dataset, DatasetFormat};

fn shim_spec() -> ExecutorSpec {
    ExecutorSpec {
        runtime_command: vec!["python3".into(), fixture_path("runner_shim.py").display().to_string()],
        time_limit: Duration::from_secs(10),
        ..Default::default()
    }
}

fn runtime_arg() -> String {
    shim_spec().runtime_command.join(" ")
}

fn cotloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotloop")).args(args).output().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
    cassette: PathBuf,
}

/// Dataset file plus a cassette recorded through the real shim, so the
/// binary's replayed conversations match byte for byte.
fn workspace(fix_steps: Vec<usize>) -> Option<Workspace> {
    if SubprocessBackend::probe(&shim_spec()).is_err() {
        eprintln!("python3 not available; skipping");
        return None;
    }
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let ds = dataset(fix_steps.len());
    let dataset_path = root.join("tasks.jsonl");
    std::fs::write(&dataset_path, ds.to_humaneval_jsonl()).unwrap();
    let loaded = Dataset::load(&dataset_path, DatasetFormat::HumanEval).unwrap();

    let cassette = root.join("cassette.jsonl");
    let prompts = PromptBuilder::default();
    let manifest = RunManifest {
        run_id: String::new(),
        dataset_path: dataset_path.clone(),
        dataset_format: DatasetFormat::HumanEval,
        dataset_hash: loaded.source_hash.clone(),
        model: ModelConfig { model_name: "scripted".into(), ..Default::default() },
        loop_config: LoopConfig::default(),
        executor: shim_spec(),
        client_mode: ClientMode::Record,
        cassette: Some(cassette.clone()),
        output_dir: root.join("recording"),
        template_version: prompts.templates().version.clone(),
        template_hash: prompts.templates().hash().to_string(),
        jobs: 2,
    }
    .seal();
    let client = RecordingClient::new(ScriptedClient::new(fix_steps), Cassette::open_record(&cassette).unwrap());
    let executor = Executor::with_concurrency(shim_spec(), Arc::new(SubprocessBackend), 2);
    run_pipeline(&manifest, &loaded, &prompts, &client, &executor).unwrap();
    Some(Workspace { _dir: dir, root, dataset: dataset_path, cassette })
}

fn run_args<'a>(ws: &'a Workspace, out: &'a Path, dataset: &'a Path, runtime: &'a str) -> Vec<&'a str> {
    vec![
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--model",
        "scripted",
        "--client",
        "replay",
        "--cassette",
        ws.cassette.to_str().unwrap(),
        "--runtime",
        runtime,
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn replay_run_resume_and_eval() {
    let Some(ws) = workspace(vec![0, 1, 7]) else { return };
    let runtime = runtime_arg();
    let out = ws.root.join("run");

    let first = cotloop(&run_args(&ws, &out, &ws.dataset, &runtime));
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let traces = out.join("traces.jsonl");
    let records = load_traces(&traces).unwrap();
    assert_eq!(records.len(), 3);
    assert!(out.join("manifest.json").exists());
    let bytes = std::fs::read(&traces).unwrap();

    let second = cotloop(&run_args(&ws, &out, &ws.dataset, &runtime));
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert!(String::from_utf8_lossy(&second.stdout).contains("0 completed, 3 skipped"));
    assert_eq!(std::fs::read(&traces).unwrap(), bytes);

    let report = ws.root.join("report.json");
    let eval = cotloop(&[
        "eval",
        "--traces",
        traces.to_str().unwrap(),
        "--dataset",
        ws.dataset.to_str().unwrap(),
        "--runtime",
        &runtime,
        "--validate-tests",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("66.7%"), "{text}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((json["pass_at_k"]["1"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn steps_sweep_from_manifest() {
    let Some(ws) = workspace(vec![0, 1, 2]) else { return };
    let runtime = runtime_arg();
    let out = ws.root.join("run");
    let run = cotloop(&run_args(&ws, &out, &ws.dataset, &runtime));
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    let traces = out.join("traces.jsonl");
    let eval = cotloop(&[
        "eval",
        "--traces",
        traces.to_str().unwrap(),
        "--dataset",
        ws.dataset.to_str().unwrap(),
        "--runtime",
        &runtime,
        "--steps-sweep",
        "0,1,2",
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let text = String::from_utf8_lossy(&eval.stdout);
    for pct in ["33.3%", "66.7%", "100.0%"] {
        assert!(text.contains(pct), "{pct} missing from:\n{text}");
    }
}

#[test]
fn missing_cassette_is_an_environment_error() {
    let Some(ws) = workspace(vec![0]) else { return };
    let runtime = runtime_arg();
    let out = ws.root.join("run");
    let mut args = run_args(&ws, &out, &ws.dataset, &runtime);
    let missing = ws.root.join("nope.jsonl");
    let pos = args.iter().position(|a| *a == "--cassette").unwrap();
    args[pos + 1] = missing.to_str().unwrap();
    let o = cotloop(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_runtime_is_an_environment_error() {
    let Some(ws) = workspace(vec![0]) else { return };
    let out = ws.root.join("run");
    let o = cotloop(&run_args(&ws, &out, &ws.dataset, "no-such-interpreter-xyz shim.py"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn reusing_an_output_dir_with_another_dataset_is_rejected() {
    let Some(ws) = workspace(vec![0, 0]) else { return };
    let runtime = runtime_arg();
    let out = ws.root.join("run");
    let o = cotloop(&run_args(&ws, &out, &ws.dataset, &runtime));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let other = ws.root.join("other.jsonl");
    std::fs::write(&other, dataset(1).to_humaneval_jsonl()).unwrap();
    let o = cotloop(&run_args(&ws, &out, &other, &runtime));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("already holds run"), "{}", stderr(&o));
}

#[test]
fn unknown_task_in_cassette_is_partial() {
    let Some(ws) = workspace(vec![0]) else { return };
    let runtime = runtime_arg();
    let bigger = ws.root.join("bigger.jsonl");
    std::fs::write(&bigger, dataset(2).to_humaneval_jsonl()).unwrap();
    let out = ws.root.join("run");
    let o = cotloop(&run_args(&ws, &out, &bigger, &runtime));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(load_traces(out.join("traces.jsonl")).unwrap().len(), 1);
    assert!(out.join("errors.jsonl").exists());
}

#[test]
fn usage_errors() {
    assert_eq!(cotloop(&["run"]).status.code(), Some(1));
    assert_eq!(cotloop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cotloop(&["run", "--dataset", "x", "--out", "y", "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(cotloop(&["--help"]).status.code(), Some(0));
    let bad_dataset = cotloop(&["eval", "--traces", "t.jsonl", "--dataset", "/nonexistent/file.jsonl"]);
    assert_ne!(bad_dataset.status.code(), Some(0));
}
