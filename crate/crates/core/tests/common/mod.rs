#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use cotloop::dataset::{Dataset, Task};
use cotloop::execution::{ExecError, ExecutionBackend, Executor, ExecutorSpec, RawRun, ShimPayload};
use cotloop::llm::{ChatClient, LlmError};
use cotloop::prompting::Conversation;

pub const FIXED: &str = "# FIXED";
pub const BROKEN: &str = "# BROKEN";
pub const CRASH: &str = "# CRASH";

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn entry_point(i: usize) -> String {
    format!("solve_{i}")
}

pub fn task(i: usize) -> Task {
    let ep = entry_point(i);
    Task {
        task_id: format!("Synthetic/{i}"),
        prompt: format!("def {ep}(x):\n    \"\"\"Return x unchanged.\"\"\"\n"),
        entry_point: ep,
        canonical_solution: "    return x\n".into(),
        reference_test: "def check(candidate):\n    assert candidate(1) == 1\n".into(),
        extra: BTreeMap::new(),
    }
}

pub fn dataset(n: usize) -> Dataset {
    Dataset {
        name: "synthetic".into(),
        tasks: (0..n).map(task).collect(),
        source_hash: String::new(),
    }
}

/// Decides outcomes from markers in the candidate source, never running it.
/// `# FIXED` passes, `# CRASH` raises a non-assertion error, anything else
/// fails the first test. A test containing `WRONG` fails even on fixed code.
#[derive(Default)]
pub struct FakeBackend {
    pub runs: Mutex<Vec<ShimPayload>>,
}

impl ExecutionBackend for FakeBackend {
    fn execute(&self, payload: &ShimPayload, _spec: &ExecutorSpec) -> Result<RawRun, ExecError> {
        self.runs.lock().unwrap().push(payload.clone());
        let src = &payload.candidate_source;
        let line = if src.contains(CRASH) {
            r#"{"status":"error","message":"SyntaxError: invalid syntax (line 4)"}"#.to_string()
        } else if let Some(i) = payload.test_statements.iter().position(|t| t.contains("WRONG")) {
            format!(r#"{{"status":"assert","test_index":{i},"message":"AssertionError"}}"#)
        } else if src.contains(FIXED) || (!src.contains(BROKEN) && src.contains("return x\n")) {
            r#"{"status":"pass"}"#.to_string()
        } else {
            r#"{"status":"assert","test_index":0,"message":"AssertionError"}"#.to_string()
        };
        Ok(RawRun::protocol(&line))
    }
}

pub fn fake_executor() -> (Executor, Arc<FakeBackend>) {
    let backend = Arc::new(FakeBackend::default());
    (Executor::with_concurrency(ExecutorSpec::default(), backend.clone(), 4), backend)
}

/// Response for step `step` of a task fixed at `fix_step`. Broken code records
/// its step so a repair prompt (which quotes the prior code) reveals the depth.
pub fn scripted_response(ep: &str, step: usize, fix_step: usize) -> String {
    let marker = if step >= fix_step { FIXED } else { BROKEN };
    let body = if step >= fix_step { "x" } else { "x + 1" };
    format!(
        "Reasoning about the task first.\n```python\ndef {ep}(x):\n    # attempt {step}\n    return {body}  {marker}\n```\nTests:\n```python\nassert {ep}(1) == 1\nassert {ep}(2) == 2\nassert {ep}(0) == 0\nassert {ep}(5) == 5\nassert {ep}(-1) == -1\n```\n"
    )
}

/// Step index implied by a conversation: 0 for a generation prompt, one more
/// than the attempt quoted in a repair prompt.
pub fn step_of(conversation: &Conversation) -> usize {
    let text = conversation.last_user().unwrap_or_default();
    if !text.contains("previous implementation") {
        return 0;
    }
    text.split("# attempt ")
        .nth(1)
        .and_then(|rest| rest.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|d| d.parse::<usize>().ok())
        .map_or(1, |s| s + 1)
}

pub fn task_index(conversation: &Conversation) -> usize {
    let text = conversation.last_user().unwrap_or_default();
    let rest = text.split("def solve_").nth(1).expect("synthetic task prompt");
    rest.split(|c: char| !c.is_ascii_digit()).next().unwrap().parse().unwrap()
}

/// Deterministic client: task `i` answers correctly from step `fix_steps[i]` on.
/// A response depends only on (task, step), never on call order.
pub struct ScriptedClient {
    pub fix_steps: Vec<usize>,
    /// When set, tasks in this list are only solvable with a reasoning prompt.
    pub cot_only: Vec<usize>,
    pub calls: Mutex<HashMap<usize, usize>>,
}

impl ScriptedClient {
    pub fn new(fix_steps: Vec<usize>) -> Self {
        ScriptedClient { fix_steps, cot_only: Vec::new(), calls: Mutex::new(HashMap::new()) }
    }

    pub fn calls_for(&self, task: usize) -> usize {
        self.calls.lock().unwrap().get(&task).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }
}

impl ChatClient for ScriptedClient {
    fn model_name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        let idx = task_index(conversation);
        *self.calls.lock().unwrap().entry(idx).or_default() += 1;
        let step = step_of(conversation);
        let cot = conversation.last_user().unwrap_or_default().contains("step by step");
        let fix = if self.cot_only.contains(&idx) && !cot && step == 0 {
            // without reasoning the first attempt is wrong; repairs still work
            1
        } else {
            self.fix_steps[idx]
        };
        Ok(scripted_response(&entry_point(idx), step, fix))
    }
}
