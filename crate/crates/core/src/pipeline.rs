//! Run orchestration: manifests, client construction, resumable trace files.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, DatasetFormat};
use crate::evaluator::{score_run, AblationRow, EvalError};
use crate::execution::{ExecError, Executor, ExecutorSpec};
use crate::llm::{Cassette, ChatClient, LiveClient, LlmError, ModelConfig, RecordingClient, ReplayClient};
use crate::prompting::PromptBuilder;
use crate::refine::{run_task, LoopConfig, LoopError, LoopMode, RefinementTrace};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    BadRecord { path: String, line: usize, message: String },
    #[error("replay mode requires --cassette")]
    MissingCassette,
    #[error("{dir} already holds run {existing}; this configuration is run {requested}")]
    ManifestMismatch { dir: String, existing: String, requested: String },
    #[error("no modes given")]
    NoModes,
    #[error("failed to start worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ClientMode::Live),
            "record" => Ok(ClientMode::Record),
            "replay" => Ok(ClientMode::Replay),
            other => Err(format!("unknown client mode `{other}`")),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset_path: PathBuf,
    pub dataset_format: DatasetFormat,
    pub dataset_hash: String,
    pub model: ModelConfig,
    pub loop_config: LoopConfig,
    pub executor: ExecutorSpec,
    pub client_mode: ClientMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub template_version: String,
    pub template_hash: String,
    pub jobs: usize,
}

impl RunManifest {
    /// Fills in `run_id` as a digest of every other field.
    pub fn seal(mut self) -> Self {
        self.run_id = String::new();
        let doc = serde_json::to_vec(&self).expect("manifest serializes");
        self.run_id = hex::encode(&Sha256::digest(&doc)[..8]);
        self
    }

    pub fn traces_path(&self) -> PathBuf {
        self.output_dir.join(TRACES_FILE)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::BadRecord {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Writes the manifest, refusing to mix runs in one output directory.
    pub fn write(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.output_dir).map_err(io_err(&self.output_dir))?;
        let path = self.manifest_path();
        if path.is_file() {
            let existing = Self::load(&path)?;
            if existing.run_id != self.run_id {
                return Err(PipelineError::ManifestMismatch {
                    dir: self.output_dir.display().to_string(),
                    existing: existing.run_id,
                    requested: self.run_id.clone(),
                });
            }
        }
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Builds the client described by the manifest. Replay fails here, before
    /// any work, if the cassette is missing.
    pub fn client(&self) -> Result<Box<dyn ChatClient>, PipelineError> {
        Ok(match self.client_mode {
            ClientMode::Live => Box::new(LiveClient::new(self.model.clone())?),
            ClientMode::Record => {
                let path = self.cassette.as_ref().ok_or(PipelineError::MissingCassette)?;
                Box::new(RecordingClient::new(LiveClient::new(self.model.clone())?, Cassette::open_record(path)?))
            }
            ClientMode::Replay => {
                let path = self.cassette.as_ref().ok_or(PipelineError::MissingCassette)?;
                Box::new(ReplayClient::new(
                    self.model.model_name.clone(),
                    self.model.temperature,
                    Cassette::open_replay(path)?,
                ))
            }
        })
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(flatten)]
    pub trace: RefinementTrace,
    pub config: LoopConfig,
    pub model_name: String,
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| PipelineError::BadRecord {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub completed: usize,
    pub skipped: usize,
    /// (task_id, error message)
    pub errored: Vec<(String, String)>,
}

impl RunSummary {
    pub fn is_partial(&self) -> bool {
        !self.errored.is_empty()
    }
}

/// Runs every task not already present in the trace file. Records are
/// appended in dataset order by a single writer, so a rerun after an
/// interruption resumes where the file ends and the finished file does not
/// depend on scheduling. Errored tasks are listed in `errors.jsonl` and are
/// retried on the next run.
pub fn run_pipeline(
    manifest: &RunManifest,
    dataset: &Dataset,
    prompts: &PromptBuilder,
    client: &dyn ChatClient,
    executor: &Executor,
) -> Result<RunSummary, PipelineError> {
    manifest.loop_config.validate()?;
    manifest.write()?;
    let traces_path = manifest.traces_path();
    let done: HashSet<String> = if traces_path.is_file() {
        load_traces(&traces_path)?.into_iter().map(|r| r.trace.task_id).collect()
    } else {
        HashSet::new()
    };
    let pending: Vec<_> = dataset.tasks.iter().filter(|t| !done.contains(&t.task_id)).collect();
    let mut summary = RunSummary { skipped: dataset.len() - pending.len(), ..Default::default() };
    info!("{} task(s) to run, {} already done", pending.len(), summary.skipped);

    let mut out = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&traces_path)
        .map_err(io_err(&traces_path))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let cfg = manifest.loop_config;
    let model_name = client.model_name().to_string();

    let (tx, rx) = mpsc::channel::<(usize, Result<RefinementTrace, LoopError>)>();
    let write_result = std::thread::scope(|scope| {
        let pending = &pending;
        scope.spawn(move || {
            pool.install(|| {
                pending.par_iter().enumerate().for_each_with(tx, |tx, (i, task)| {
                    let _ = tx.send((i, run_task(task, &cfg, prompts, client, executor)));
                });
            });
        });

        let mut next = 0;
        let mut buffered = BTreeMap::new();
        for (i, result) in rx {
            buffered.insert(i, result);
            while let Some(result) = buffered.remove(&next) {
                let task_id = &pending[next].task_id;
                match result {
                    Ok(trace) => {
                        let record = TraceRecord { trace, config: cfg, model_name: model_name.clone() };
                        let mut line = serde_json::to_string(&record).expect("trace serializes");
                        line.push('\n');
                        out.write_all(line.as_bytes()).and_then(|_| out.flush()).map_err(io_err(&traces_path))?;
                        summary.completed += 1;
                    }
                    Err(e) => {
                        warn!("{task_id}: {e}");
                        summary.errored.push((task_id.clone(), e.to_string()));
                    }
                }
                next += 1;
            }
        }
        Ok::<_, PipelineError>(())
    });
    write_result?;

    let errors_path = manifest.output_dir.join(ERRORS_FILE);
    if summary.errored.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path).map_err(io_err(&errors_path))?;
        }
    } else {
        let body: String = summary
            .errored
            .iter()
            .map(|(id, msg)| format!("{}\n", serde_json::json!({"task_id": id, "error": msg})))
            .collect();
        fs::write(&errors_path, body).map_err(io_err(&errors_path))?;
    }
    Ok(summary)
}

/// One run and scoring per mode, each in `<output_dir>/<mode>/`.
pub fn ablate(
    base: &RunManifest,
    modes: &[LoopMode],
    dataset: &Dataset,
    prompts: &PromptBuilder,
    client: &dyn ChatClient,
    executor: &Executor,
) -> Result<Vec<AblationRow>, PipelineError> {
    if modes.is_empty() {
        return Err(PipelineError::NoModes);
    }
    modes
        .iter()
        .map(|&mode| {
            let manifest = RunManifest {
                loop_config: LoopConfig {
                    mode,
                    refine_tests: base.loop_config.refine_tests && mode.self_examines(),
                    ..base.loop_config
                },
                output_dir: base.output_dir.join(mode.as_str()),
                ..base.clone()
            }
            .seal();
            run_pipeline(&manifest, dataset, prompts, client, executor)?;
            let traces: Vec<RefinementTrace> = load_traces(manifest.traces_path())?.into_iter().map(|r| r.trace).collect();
            let report = score_run(&traces, dataset, executor, &[])?;
            Ok(AblationRow {
                mode,
                pass_at_1: report.pass_at_1(),
                executions: traces.iter().map(RefinementTrace::executions).sum(),
                error_distribution: report.error_distribution,
            })
        })
        .collect()
}
