//! HumanEval / MBPP task ingestion from line-delimited JSON.
//!
//! Field mapping:
//!
//! | Task field           | humaneval            | mbpp                                   |
//! |----------------------|----------------------|----------------------------------------|
//! | `task_id`            | `task_id`            | `task_id` (integer, stringified)       |
//! | `prompt`             | `prompt`             | `text` + first entry of `test_list`    |
//! | `entry_point`        | `entry_point`        | first `def` in `code`                  |
//! | `canonical_solution` | `canonical_solution` | `code`                                 |
//! | `reference_test`     | `test`               | `test_list` joined with newlines       |
//!
//! Every other field is kept in [`Task::extra`] and otherwise ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing or invalid field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {reason}")]
    InvalidTask { line: usize, reason: String },
    #[error("duplicate task_id `{0}`")]
    DuplicateTaskId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    HumanEval,
    Mbpp,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "humaneval" => Ok(Self::HumanEval),
            "mbpp" => Ok(Self::Mbpp),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HumanEval => "humaneval",
            Self::Mbpp => "mbpp",
        })
    }
}

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    /// Signature plus docstring; the text the model sees.
    pub prompt: String,
    pub entry_point: String,
    pub canonical_solution: String,
    /// Hidden check program. Used only for final scoring.
    pub reference_test: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl Task {
    /// Everything in the prompt that precedes the entry point's definition
    /// (imports, helper functions). Empty when the prompt holds no such
    /// definition, as with prose MBPP prompts.
    pub fn preamble(&self) -> &str {
        match find_top_level_def(&self.prompt, &self.entry_point) {
            Some(offset) => &self.prompt[..offset],
            None => "",
        }
    }

    /// Builds a runnable program from `code`. A full definition of the entry
    /// point gets the prompt preamble prepended; anything else is treated as a
    /// function body completing the prompt.
    pub fn program_for(&self, code: &str) -> String {
        if defines_function(code, &self.entry_point) {
            let preamble = self.preamble();
            if preamble.is_empty() {
                code.to_string()
            } else {
                format!("{}\n{}", preamble.trim_end(), code)
            }
        } else {
            format!("{}{}", self.prompt, code)
        }
    }

    /// Statements that run the hidden reference test. A `check` function is
    /// invoked on the entry point after being defined.
    pub fn reference_statements(&self) -> Vec<String> {
        let mut stmts = vec![self.reference_test.clone()];
        if defines_function(&self.reference_test, "check") {
            stmts.push(format!("check({})", self.entry_point));
        }
        stmts
    }

    fn validate(&self, line: usize) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidTask { line, reason };
        if self.task_id.is_empty() {
            return Err(invalid("empty task_id".into()));
        }
        if self.entry_point.is_empty() {
            return Err(invalid(format!("{}: empty entry_point", self.task_id)));
        }
        if !mentions_identifier(&self.prompt, &self.entry_point) {
            return Err(invalid(format!(
                "{}: entry_point `{}` does not occur in prompt",
                self.task_id, self.entry_point
            )));
        }
        if self.canonical_solution.trim().is_empty() {
            return Err(invalid(format!("{}: empty canonical_solution", self.task_id)));
        }
        if self.reference_test.trim().is_empty() {
            return Err(invalid(format!("{}: empty reference test", self.task_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub tasks: Vec<Task>,
    /// SHA-256 of the source file bytes, hex encoded.
    #[serde(default)]
    pub source_hash: String,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(name, &bytes, format)
    }

    pub fn from_bytes(
        name: impl Into<String>,
        bytes: &[u8],
        format: DatasetFormat,
    ) -> Result<Self, DatasetError> {
        let text = String::from_utf8_lossy(bytes);
        let mut tasks = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let record: Map<String, Value> = serde_json::from_str(raw)
                .map_err(|source| DatasetError::Malformed { line, source })?;
            let task = match format {
                DatasetFormat::HumanEval => humaneval_task(record, line)?,
                DatasetFormat::Mbpp => mbpp_task(record, line)?,
            };
            task.validate(line)?;
            if !seen.insert(task.task_id.clone()) {
                return Err(DatasetError::DuplicateTaskId(task.task_id));
            }
            tasks.push(task);
        }
        Ok(Dataset {
            name: name.into(),
            tasks,
            source_hash: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Serializes every task in the humaneval field layout, one per line.
    pub fn to_humaneval_jsonl(&self) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            let mut record: Map<String, Value> = task
                .extra
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            record.insert("task_id".into(), task.task_id.clone().into());
            record.insert("prompt".into(), task.prompt.clone().into());
            record.insert("entry_point".into(), task.entry_point.clone().into());
            record.insert("canonical_solution".into(), task.canonical_solution.clone().into());
            record.insert("test".into(), task.reference_test.clone().into());
            out.push_str(&Value::Object(record).to_string());
            out.push('\n');
        }
        out
    }
}

fn take_string(
    record: &mut Map<String, Value>,
    field: &'static str,
    line: usize,
) -> Result<String, DatasetError> {
    match record.remove(field) {
        Some(Value::String(s)) => Ok(s),
        _ => Err(DatasetError::MissingField { line, field }),
    }
}

fn humaneval_task(mut record: Map<String, Value>, line: usize) -> Result<Task, DatasetError> {
    let task_id = take_string(&mut record, "task_id", line)?;
    let prompt = take_string(&mut record, "prompt", line)?;
    let entry_point = take_string(&mut record, "entry_point", line)?;
    let canonical_solution = take_string(&mut record, "canonical_solution", line)?;
    let reference_test = take_string(&mut record, "test", line)?;
    Ok(Task {
        task_id,
        prompt,
        entry_point,
        canonical_solution,
        reference_test,
        extra: record.into_iter().collect(),
    })
}

fn mbpp_task(mut record: Map<String, Value>, line: usize) -> Result<Task, DatasetError> {
    let task_id = match record.remove("task_id") {
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::String(s)) => s,
        _ => return Err(DatasetError::MissingField { line, field: "task_id" }),
    };
    let text = take_string(&mut record, "text", line)?;
    let code = take_string(&mut record, "code", line)?;
    let tests: Vec<String> = match record.remove("test_list") {
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                _ => Err(DatasetError::MissingField { line, field: "test_list" }),
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(DatasetError::MissingField { line, field: "test_list" }),
    };
    let entry_point = first_def_name(&code).ok_or_else(|| DatasetError::InvalidTask {
        line,
        reason: format!("{task_id}: no function definition in code"),
    })?;
    let prompt = match tests.first() {
        Some(first) => format!("{text}\nYour code should pass this test:\n{first}\n"),
        None => format!("{text}\n"),
    };
    Ok(Task {
        task_id,
        prompt,
        entry_point,
        canonical_solution: code,
        reference_test: tests.join("\n"),
        extra: record.into_iter().collect(),
    })
}

static FIRST_DEF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^(?:async\s+)?def\s+([A-Za-z_]\w*)\s*\(").expect("static regex"));

fn first_def_name(code: &str) -> Option<String> {
    FIRST_DEF.captures(code).map(|c| c[1].to_string())
}

/// Byte offset of the line holding a top-level `def name(`.
fn find_top_level_def(source: &str, name: &str) -> Option<usize> {
    let mut offset = 0;
    for line in source.split_inclusive('\n') {
        let rest = line.strip_prefix("async").map_or(line, |r| {
            if r.starts_with([' ', '\t']) { r.trim_start() } else { line }
        });
        let defined = rest
            .strip_prefix("def")
            .filter(|r| r.starts_with([' ', '\t']))
            .and_then(|r| r.trim_start().strip_prefix(name))
            .is_some_and(|r| r.trim_start().starts_with('('));
        if defined {
            return Some(offset);
        }
        offset += line.len();
    }
    None
}

/// True when `source` defines `name` at the top level.
pub fn defines_function(source: &str, name: &str) -> bool {
    find_top_level_def(source, name).is_some()
}

/// True when `name` appears in `text` as a whole identifier.
pub fn mentions_identifier(text: &str, name: &str) -> bool {
    if name.is_empty() {
        return false;
    }
    let is_ident = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(name).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + name.len()..].chars().next();
        !before.is_some_and(is_ident) && !after.is_some_and(is_ident)
    })
}
