//! Candidate execution and outcome classification.
//!
//! A backend runs a [`ShimPayload`] and returns what the process produced; the
//! [`Executor`] turns that into an [`ExecutionOutcome`] using the two-bucket
//! taxonomy: assertion failures are `AssertError`, every other non-pass result
//! (load errors, runtime exceptions, timeouts, garbled output) is `SyntaxError`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Task;
use crate::parser::GenerationArtifact;

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(10);
pub const DEFAULT_OUTPUT_CAP: usize = 64 * 1024;
pub const TIMEOUT_DIAGNOSTIC: &str = "timeout";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("execution backend unavailable ({command}): {reason}")]
    BackendUnavailable { command: String, reason: String },
    #[error("candidate has no tests to run")]
    NoTests,
    #[error("no code to execute")]
    EmptyCode,
    #[error("execution I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeClass {
    Pass,
    AssertError,
    /// Every non-assertion failure.
    SyntaxError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub class: OutcomeClass,
    /// Empty exactly when `class` is `Pass`.
    pub diagnostic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_test_index: Option<usize>,
    /// Not persisted: traces must replay byte-identically.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExecutionOutcome {
    pub fn is_pass(&self) -> bool {
        self.class == OutcomeClass::Pass
    }

    pub fn pass() -> Self {
        ExecutionOutcome {
            class: OutcomeClass::Pass,
            diagnostic: String::new(),
            failed_test_index: None,
            wall_time: Duration::ZERO,
        }
    }

    pub fn assert_error(index: usize, message: impl Into<String>) -> Self {
        ExecutionOutcome {
            class: OutcomeClass::AssertError,
            diagnostic: non_empty(message.into(), "AssertionError"),
            failed_test_index: Some(index),
            wall_time: Duration::ZERO,
        }
    }

    pub fn other_error(message: impl Into<String>) -> Self {
        ExecutionOutcome {
            class: OutcomeClass::SyntaxError,
            diagnostic: non_empty(message.into(), "error"),
            failed_test_index: None,
            wall_time: Duration::ZERO,
        }
    }
}

fn non_empty(s: String, fallback: &str) -> String {
    if s.trim().is_empty() {
        fallback.to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorSpec {
    pub runtime_command: Vec<String>,
    pub time_limit: Duration,
    pub output_cap: usize,
}

impl Default for ExecutorSpec {
    fn default() -> Self {
        ExecutorSpec {
            runtime_command: vec!["python3".into(), "runner_shim.py".into()],
            time_limit: DEFAULT_TIME_LIMIT,
            output_cap: DEFAULT_OUTPUT_CAP,
        }
    }
}

/// Document written to the shim's standard input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimPayload {
    pub candidate_source: String,
    pub test_statements: Vec<String>,
    pub entry_point: String,
}

/// What a backend observed from one run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawRun {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
}

impl RawRun {
    /// A run whose stdout is the given protocol line.
    pub fn protocol(line: &str) -> Self {
        RawRun {
            exit_code: Some(0),
            stdout: format!("{line}\n"),
            ..Default::default()
        }
    }
}

pub trait ExecutionBackend: Send + Sync {
    fn execute(&self, payload: &ShimPayload, spec: &ExecutorSpec) -> Result<RawRun, ExecError>;
}

#[derive(Debug, Deserialize)]
struct ShimReport {
    status: String,
    #[serde(default)]
    test_index: Option<usize>,
    #[serde(default)]
    message: Option<String>,
}

/// Maps a raw run onto the outcome taxonomy.
pub fn classify(raw: &RawRun, output_cap: usize) -> ExecutionOutcome {
    if raw.timed_out {
        return ExecutionOutcome::other_error(TIMEOUT_DIAGNOSTIC);
    }
    let report = raw
        .stdout
        .lines()
        .rev()
        .filter(|l| !l.trim().is_empty())
        .find_map(|l| serde_json::from_str::<ShimReport>(l.trim()).ok());
    let cap = |s: String| cap_tail(&s, output_cap);
    match report {
        Some(r) if r.status == "pass" => ExecutionOutcome::pass(),
        Some(r) if r.status == "assert" => {
            let message = cap(r.message.unwrap_or_default());
            match r.test_index {
                Some(i) => ExecutionOutcome::assert_error(i, message),
                None => ExecutionOutcome {
                    failed_test_index: None,
                    ..ExecutionOutcome::assert_error(0, message)
                },
            }
        }
        Some(r) if r.status == "error" => ExecutionOutcome::other_error(cap(r.message.unwrap_or_default())),
        _ => {
            let mut raw_output = raw.stdout.clone();
            if !raw.stderr.is_empty() {
                if !raw_output.is_empty() && !raw_output.ends_with('\n') {
                    raw_output.push('\n');
                }
                raw_output.push_str(&raw.stderr);
            }
            if raw_output.trim().is_empty() {
                raw_output = match raw.exit_code {
                    Some(code) => format!("process exited with status {code} and no output"),
                    None => "process terminated by a signal with no output".into(),
                };
            }
            ExecutionOutcome::other_error(cap(raw_output))
        }
    }
}

/// Keeps the last `cap` bytes of `s`, moved forward to a char boundary.
pub fn cap_tail(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_string();
    }
    let mut start = s.len() - cap;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_string()
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Runs candidates through a backend with a bound on concurrent runs.
pub struct Executor {
    spec: ExecutorSpec,
    backend: Arc<dyn ExecutionBackend>,
    slots: Semaphore,
    runs: AtomicUsize,
}

impl Executor {
    pub fn new(spec: ExecutorSpec, backend: Arc<dyn ExecutionBackend>) -> Self {
        let cpus = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self::with_concurrency(spec, backend, cpus)
    }

    pub fn with_concurrency(spec: ExecutorSpec, backend: Arc<dyn ExecutionBackend>, limit: usize) -> Self {
        Executor {
            spec,
            backend,
            slots: Semaphore::new(limit),
            runs: AtomicUsize::new(0),
        }
    }

    pub fn spec(&self) -> &ExecutorSpec {
        &self.spec
    }

    /// Number of backend executions performed so far.
    pub fn executions(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }

    /// Runs the candidate against its own generated tests.
    pub fn run_candidate(&self, task: &Task, artifact: &GenerationArtifact) -> Result<ExecutionOutcome, ExecError> {
        if artifact.tests.is_empty() {
            return Err(ExecError::NoTests);
        }
        self.run(ShimPayload {
            candidate_source: task.program_for(&artifact.code),
            test_statements: artifact.tests.clone(),
            entry_point: task.entry_point.clone(),
        })
    }

    /// Runs `code` against the task's hidden reference test.
    pub fn run_reference(&self, task: &Task, code: &str) -> Result<ExecutionOutcome, ExecError> {
        if code.trim().is_empty() {
            return Err(ExecError::EmptyCode);
        }
        self.run(ShimPayload {
            candidate_source: task.program_for(code),
            test_statements: task.reference_statements(),
            entry_point: task.entry_point.clone(),
        })
    }

    /// Runs generated `tests` against the task's canonical solution.
    pub fn run_tests_on_canonical(&self, task: &Task, tests: &[String]) -> Result<ExecutionOutcome, ExecError> {
        if tests.is_empty() {
            return Err(ExecError::NoTests);
        }
        self.run(ShimPayload {
            candidate_source: task.program_for(&task.canonical_solution),
            test_statements: tests.to_vec(),
            entry_point: task.entry_point.clone(),
        })
    }

    fn run(&self, payload: ShimPayload) -> Result<ExecutionOutcome, ExecError> {
        let _permit = self.slots.acquire();
        let start = Instant::now();
        let raw = self.backend.execute(&payload, &self.spec)?;
        self.runs.fetch_add(1, Ordering::SeqCst);
        let mut outcome = classify(&raw, self.spec.output_cap);
        outcome.wall_time = start.elapsed();
        Ok(outcome)
    }
}

/// Runs the shim as a child process in a fresh temporary directory.
#[derive(Debug, Clone, Default)]
pub struct SubprocessBackend;

const KILL_GRACE: Duration = Duration::from_secs(1);
const POLL: Duration = Duration::from_millis(5);

impl SubprocessBackend {
    /// Checks that the runtime executable can be found before any work starts.
    pub fn probe(spec: &ExecutorSpec) -> Result<PathBuf, ExecError> {
        let program = spec.runtime_command.first().ok_or_else(|| ExecError::BackendUnavailable {
            command: String::new(),
            reason: "empty runtime command".into(),
        })?;
        resolve_executable(program).ok_or_else(|| ExecError::BackendUnavailable {
            command: spec.runtime_command.join(" "),
            reason: format!("`{program}` not found or not executable"),
        })
    }
}

fn resolve_executable(program: &str) -> Option<PathBuf> {
    let is_exec = |p: &Path| {
        p.is_file() && {
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                p.metadata().map(|m| m.permissions().mode() & 0o111 != 0).unwrap_or(false)
            }
            #[cfg(not(unix))]
            {
                true
            }
        }
    };
    if program.contains(std::path::MAIN_SEPARATOR) || program.contains('/') {
        let p = PathBuf::from(program);
        return is_exec(&p).then_some(p);
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(program))
            .find(|p| is_exec(p))
    })
}

fn drain_tail(mut reader: impl Read, cap: usize) -> Vec<u8> {
    let mut kept: Vec<u8> = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                kept.extend_from_slice(&buf[..n]);
                if kept.len() > 2 * cap.max(1) {
                    kept.drain(..kept.len() - cap);
                }
            }
        }
    }
    if kept.len() > cap {
        kept.drain(..kept.len() - cap);
    }
    kept
}

impl ExecutionBackend for SubprocessBackend {
    fn execute(&self, payload: &ShimPayload, spec: &ExecutorSpec) -> Result<RawRun, ExecError> {
        let (program, args) = spec.runtime_command.split_first().ok_or_else(|| ExecError::BackendUnavailable {
            command: String::new(),
            reason: "empty runtime command".into(),
        })?;
        let workdir = tempfile::Builder::new().prefix("cotloop-run-").tempdir()?;
        // relative script paths resolve against the harness's directory, not the sandbox
        let args: Vec<PathBuf> = args
            .iter()
            .map(|a| {
                let p = PathBuf::from(a);
                if p.is_relative() && p.exists() {
                    std::fs::canonicalize(&p).unwrap_or(p)
                } else {
                    p
                }
            })
            .collect();
        let mut child = Command::new(program)
            .args(&args)
            .current_dir(workdir.path())
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                    ExecError::BackendUnavailable {
                        command: spec.runtime_command.join(" "),
                        reason: e.to_string(),
                    }
                }
                _ => ExecError::Io(e),
            })?;

        let input = serde_json::to_vec(payload).expect("payload serializes");
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&input);
        });
        let cap = spec.output_cap;
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || drain_tail(stdout, cap));
        let err_reader = thread::spawn(move || drain_tail(stderr, cap));

        let deadline = Instant::now() + spec.time_limit;
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if Instant::now() >= deadline {
                timed_out = true;
                let _ = child.kill();
                let kill_deadline = Instant::now() + KILL_GRACE;
                while Instant::now() < kill_deadline {
                    if child.try_wait()?.is_some() {
                        break;
                    }
                    thread::sleep(POLL);
                }
                break None;
            }
            thread::sleep(POLL);
        };
        let _ = writer.join();
        // a grandchild holding the pipes open must not stall the harness
        let collect = |h: thread::JoinHandle<Vec<u8>>| {
            if timed_out && !h.is_finished() {
                Vec::new()
            } else {
                h.join().unwrap_or_default()
            }
        };
        let stdout = collect(out_reader);
        let stderr = collect(err_reader);
        Ok(RawRun {
            exit_code: status.and_then(|s| s.code()),
            stdout: String::from_utf8_lossy(&stdout).into_owned(),
            stderr: String::from_utf8_lossy(&stderr).into_owned(),
            timed_out,
        })
    }
}
