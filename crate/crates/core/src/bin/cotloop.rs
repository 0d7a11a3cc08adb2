use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use cotloop::dataset::{Dataset, DatasetFormat};
use cotloop::evaluator::{self, render_ablation, render_report, EvalError};
use cotloop::execution::{ExecError, Executor, ExecutorSpec, SubprocessBackend};
use cotloop::llm::{LlmError, ModelConfig};
use cotloop::pipeline::{self, ClientMode, PipelineError, RunManifest};
use cotloop::prompting::{PromptBuilder, TemplateSet};
use cotloop::refine::{LoopConfig, LoopError, LoopMode, RefinementTrace};

const EXIT_USAGE: u8 = 1;
const EXIT_ENVIRONMENT: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "cotloop", version, about = "Chain-of-thought code generation with test-driven self-repair")]
#[command(after_help = concat!("The API key for live endpoints is read from $", "COTLOOP_API_KEY", "."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, self-examine and repair every task; write traces.
    Run(RunArgs),
    /// Score a trace file against the reference tests.
    Eval(EvalArgs),
    /// Compare pipeline components: one run and evaluation per mode.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "humaneval")]
    format: DatasetFormat,
}

#[derive(Args, Clone)]
struct ExecArgs {
    /// Command that runs the runner shim; split on whitespace.
    #[arg(long, default_value = "python3 runner_shim.py")]
    runtime: String,
    /// Per-execution wall-clock limit in seconds.
    #[arg(long, default_value_t = 10.0)]
    time_limit: f64,
    /// Captured output cap in bytes.
    #[arg(long, default_value_t = 64 * 1024)]
    output_cap: usize,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args, Clone)]
struct ClientArgs {
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, default_value = "https://api.openai.com/v1")]
    endpoint: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    request_timeout: u64,
    /// Live request rate limit.
    #[arg(long, default_value_t = 2.0)]
    requests_per_second: f64,
    #[arg(long, default_value = "live")]
    client: ClientMode,
    #[arg(long)]
    cassette: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct LoopArgs {
    #[arg(long, default_value_t = 5)]
    max_steps: usize,
    #[arg(long, default_value_t = 5)]
    num_tests: usize,
    #[arg(long, default_value = "codecot")]
    mode: LoopMode,
    #[arg(long)]
    refine_tests: bool,
    /// Directory with a custom template set; defaults to the built-in set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    client: ClientArgs,
    #[command(flatten)]
    looping: LoopArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    traces: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    exec: ExecArgs,
    /// Also check generated tests against the canonical solutions.
    #[arg(long)]
    validate_tests: bool,
    /// Re-run the pipeline at each step budget (comma separated, ascending),
    /// using the manifest stored next to the trace file.
    #[arg(long, value_delimiter = ',')]
    steps_sweep: Vec<usize>,
    /// Extra k values for pass@k.
    #[arg(long, value_delimiter = ',')]
    k: Vec<u64>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    client: ClientArgs,
    #[command(flatten)]
    looping: LoopArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long, value_delimiter = ',', default_value = "coder,coder_cot,coder_selfexam,codecot")]
    modes: Vec<LoopMode>,
    #[arg(long)]
    out: PathBuf,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Environment(String),
}

impl<E: Into<PipelineError>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let environment = matches!(
            &e,
            PipelineError::MissingCassette
                | PipelineError::Llm(LlmError::Cassette { .. })
                | PipelineError::Exec(ExecError::BackendUnavailable { .. })
                | PipelineError::Eval(EvalError::Exec(ExecError::BackendUnavailable { .. }))
                | PipelineError::Loop(LoopError::Exec(ExecError::BackendUnavailable { .. }))
                | PipelineError::Io { .. }
        );
        if environment {
            Failure::Environment(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn executor_spec(args: &ExecArgs) -> Result<ExecutorSpec, Failure> {
    if !(args.time_limit.is_finite() && args.time_limit > 0.0) {
        return Err(Failure::Usage("--time-limit must be positive".into()));
    }
    let runtime_command: Vec<String> = args.runtime.split_whitespace().map(str::to_string).collect();
    if runtime_command.is_empty() {
        return Err(Failure::Usage("--runtime must not be empty".into()));
    }
    Ok(ExecutorSpec {
        runtime_command,
        time_limit: Duration::from_secs_f64(args.time_limit),
        output_cap: args.output_cap,
    })
}

fn subprocess_executor(spec: ExecutorSpec, jobs: usize) -> Result<Executor, Failure> {
    SubprocessBackend::probe(&spec).map_err(PipelineError::from)?;
    Ok(Executor::with_concurrency(spec, Arc::new(SubprocessBackend), jobs))
}

fn prompt_builder(args: &LoopArgs) -> Result<PromptBuilder, Failure> {
    let templates = match &args.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(|e| Failure::Usage(e.to_string()))?,
        None => TemplateSet::builtin(),
    };
    Ok(PromptBuilder::new(templates))
}

#[allow(clippy::too_many_arguments)]
fn manifest(
    dataset: &DatasetArgs,
    loaded: &Dataset,
    client: &ClientArgs,
    looping: &LoopArgs,
    spec: ExecutorSpec,
    prompts: &PromptBuilder,
    jobs: usize,
    out: &Path,
) -> Result<RunManifest, Failure> {
    let model = ModelConfig {
        endpoint_url: client.endpoint.clone(),
        model_name: client.model.clone(),
        temperature: client.temperature,
        max_tokens: client.max_tokens,
        request_timeout: Duration::from_secs(client.request_timeout),
        max_retries: client.max_retries,
        requests_per_second: client.requests_per_second,
    };
    model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if client.client != ClientMode::Live && client.cassette.is_none() {
        return Err(Failure::Usage("--client record/replay requires --cassette".into()));
    }
    let loop_config = LoopConfig {
        max_steps: looping.max_steps,
        mode: looping.mode,
        refine_tests: looping.refine_tests,
        num_tests: looping.num_tests,
    };
    loop_config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(RunManifest {
        run_id: String::new(),
        dataset_path: dataset.dataset.clone(),
        dataset_format: dataset.format,
        dataset_hash: loaded.source_hash.clone(),
        model,
        loop_config,
        executor: spec,
        client_mode: client.client,
        cassette: client.cassette.clone(),
        output_dir: out.to_path_buf(),
        template_version: prompts.templates().version.clone(),
        template_hash: prompts.templates().hash().to_string(),
        jobs,
    }
    .seal())
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let dataset = Dataset::load(&args.dataset.dataset, args.dataset.format)?;
    let prompts = prompt_builder(&args.looping)?;
    let spec = executor_spec(&args.exec)?;
    let manifest = manifest(&args.dataset, &dataset, &args.client, &args.looping, spec.clone(), &prompts, args.exec.jobs, &args.out)?;
    let client = manifest.client()?;
    let executor = subprocess_executor(spec, args.exec.jobs)?;
    let summary = pipeline::run_pipeline(&manifest, &dataset, &prompts, client.as_ref(), &executor)?;
    println!(
        "run {}: {} completed, {} skipped, {} errored -> {}",
        manifest.run_id,
        summary.completed,
        summary.skipped,
        summary.errored.len(),
        manifest.traces_path().display()
    );
    for (task, msg) in &summary.errored {
        eprintln!("  {task}: {msg}");
    }
    Ok(if summary.is_partial() { EXIT_PARTIAL } else { 0 })
}

fn cmd_eval(args: EvalArgs) -> Result<u8, Failure> {
    let dataset = Dataset::load(&args.dataset.dataset, args.dataset.format)?;
    let records = pipeline::load_traces(&args.traces)?;
    let traces: Vec<RefinementTrace> = records.iter().map(|r| r.trace.clone()).collect();
    let executor = subprocess_executor(executor_spec(&args.exec)?, args.exec.jobs)?;
    let mut report = evaluator::score_run(&traces, &dataset, &executor, &args.k)?;
    if let Some(first) = records.first() {
        report.model = first.model_name.clone();
        report.config = Some(first.config);
    }
    if args.validate_tests {
        report.test_validity = Some(evaluator::validate_tests(&traces, &dataset, &executor)?);
    }
    if !args.steps_sweep.is_empty() {
        let manifest_path = args
            .traces
            .parent()
            .unwrap_or(Path::new("."))
            .join(pipeline::MANIFEST_FILE);
        let manifest = RunManifest::load(&manifest_path)?;
        let client = manifest.client()?;
        let prompts = PromptBuilder::default();
        if prompts.templates().hash() != manifest.template_hash {
            return Err(Failure::Usage(format!(
                "{} was produced with template set {}; the sweep would use {}",
                manifest_path.display(),
                manifest.template_hash,
                prompts.templates().hash()
            )));
        }
        report.per_step_rows = evaluator::sweep_steps(
            &dataset,
            &manifest.loop_config,
            &args.steps_sweep,
            &prompts,
            client.as_ref(),
            &executor,
        )?;
    }
    print!("{}", render_report(&report));
    if let Some(path) = &args.report {
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, body + "\n").map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<u8, Failure> {
    if args.modes.is_empty() {
        return Err(Failure::Usage("--modes must name at least one mode".into()));
    }
    let dataset = Dataset::load(&args.dataset.dataset, args.dataset.format)?;
    let prompts = prompt_builder(&args.looping)?;
    let spec = executor_spec(&args.exec)?;
    let mut looping = args.looping.clone();
    // the base manifest must validate for every mode
    looping.mode = LoopMode::Codecot;
    let base = manifest(&args.dataset, &dataset, &args.client, &looping, spec.clone(), &prompts, args.exec.jobs, &args.out)?;
    let client = base.client()?;
    let executor = subprocess_executor(spec, args.exec.jobs)?;
    let rows = pipeline::ablate(&base, &args.modes, &dataset, &prompts, client.as_ref(), &executor)?;
    print!("{}", render_ablation(&rows));
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Environment(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ENVIRONMENT)
        }
    }
}
