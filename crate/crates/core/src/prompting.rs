//! Conversation construction for initial generation and for repair.
//!
//! Template texts live in `templates/<version>/` as plain text with
//! `{{placeholder}}` markers; the built-in set is compiled in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Task;
use crate::execution::OutcomeClass;
use crate::parser::GenerationArtifact;
use crate::refine::{StepArtifact, TraceStep};

pub const DEFAULT_NUM_TESTS: usize = 5;
pub const DEFAULT_DIAGNOSTIC_CAP: usize = 2000;

const TRUNCATION_MARKER: &str = "[... earlier output truncated ...]\n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("num_tests must be at least 1")]
    ZeroTests,
    #[error("cannot build a repair prompt for a step whose outcome is Pass")]
    TailPassed,
    #[error("cannot build a repair prompt for a step that was never executed")]
    TailNotExecuted,
    #[error("template `{template}`: {message}")]
    Template { template: String, message: String },
    #[error("invalid conversation: {0}")]
    Conversation(String),
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn system(content: impl Into<String>) -> Self {
        Turn { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Turn { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Turn { role: Role::Assistant, content: content.into() }
    }
}

/// Non-empty list of turns whose first turn is a system or user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self, PromptError> {
        match turns.first() {
            None => Err(PromptError::Conversation("no turns".into())),
            Some(t) if t.role == Role::Assistant => {
                Err(PromptError::Conversation("first turn is an assistant turn".into()))
            }
            Some(_) => Ok(Conversation { turns }),
        }
    }

    pub fn last_user(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Reasoning instructions plus the worked example.
    Cot,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    TaskPrompt,
    EntryPoint,
    GuidingExample,
    PriorCode,
    PriorTests,
    ErrorFeedback,
    NumTests,
}

impl Placeholder {
    pub fn name(self) -> &'static str {
        match self {
            Placeholder::TaskPrompt => "task_prompt",
            Placeholder::EntryPoint => "entry_point",
            Placeholder::GuidingExample => "guiding_example",
            Placeholder::PriorCode => "prior_code",
            Placeholder::PriorTests => "prior_tests",
            Placeholder::ErrorFeedback => "error_feedback",
            Placeholder::NumTests => "num_tests",
        }
    }
}

impl FromStr for Placeholder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "task_prompt" => Placeholder::TaskPrompt,
            "entry_point" => Placeholder::EntryPoint,
            "guiding_example" => Placeholder::GuidingExample,
            "prior_code" => Placeholder::PriorCode,
            "prior_tests" => Placeholder::PriorTests,
            "error_feedback" => Placeholder::ErrorFeedback,
            "num_tests" => Placeholder::NumTests,
            other => return Err(format!("unknown placeholder `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let name = name.into();
        let mut segments = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| PromptError::Template {
                template: name.clone(),
                message: "unterminated `{{`".into(),
            })?;
            let slot = after[..close].trim().parse().map_err(|message| PromptError::Template {
                template: name.clone(),
                message,
            })?;
            segments.push(Segment::Slot(slot));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(PromptTemplate { name, segments })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = Placeholder> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(*p),
            Segment::Literal(_) => None,
        })
    }

    /// Substitutes every slot. Values are inserted as-is and never re-scanned.
    pub fn render(&self, bindings: &BTreeMap<Placeholder, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(p) => out.push_str(bindings.get(p).ok_or_else(|| PromptError::Template {
                    template: self.name.clone(),
                    message: format!("no binding for `{}`", p.name()),
                })?),
            }
        }
        Ok(out)
    }
}

/// A complete, versioned set of prompt texts.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub version: String,
    pub system: String,
    pub guiding_example: String,
    pub generate_cot: PromptTemplate,
    pub generate_plain: PromptTemplate,
    pub repair: PromptTemplate,
    pub repair_tests: PromptTemplate,
    hash: String,
}

const FILES: [&str; 6] = [
    "system.txt",
    "guiding_example.txt",
    "generate_cot.txt",
    "generate_plain.txt",
    "repair.txt",
    "repair_tests.txt",
];

impl TemplateSet {
    pub fn builtin() -> Self {
        let texts = [
            include_str!("../templates/v1/system.txt"),
            include_str!("../templates/v1/guiding_example.txt"),
            include_str!("../templates/v1/generate_cot.txt"),
            include_str!("../templates/v1/generate_plain.txt"),
            include_str!("../templates/v1/repair.txt"),
            include_str!("../templates/v1/repair_tests.txt"),
        ];
        Self::from_texts("v1", texts.map(str::to_string)).expect("built-in templates are valid")
    }

    /// Loads the six template files from `dir`; the directory name is the version.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut texts: [String; 6] = Default::default();
        for (slot, file) in texts.iter_mut().zip(FILES) {
            let path = dir.join(file);
            *slot = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::from_texts(&version, texts)
    }

    fn from_texts(version: &str, texts: [String; 6]) -> Result<Self, PromptError> {
        let mut hasher = Sha256::new();
        for (file, text) in FILES.iter().zip(&texts) {
            hasher.update(file.as_bytes());
            hasher.update([0u8]);
            hasher.update(text.as_bytes());
            hasher.update([0u8]);
        }
        let [system, guiding_example, cot, plain, repair, repair_tests] = texts;
        Ok(TemplateSet {
            version: version.to_string(),
            system,
            guiding_example,
            generate_cot: PromptTemplate::parse("generate_cot", &cot)?,
            generate_plain: PromptTemplate::parse("generate_plain", &plain)?,
            repair: PromptTemplate::parse("repair", &repair)?,
            repair_tests: PromptTemplate::parse("repair_tests", &repair_tests)?,
            hash: hex::encode(hasher.finalize()),
        })
    }

    /// SHA-256 over every file name and text in the set.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

impl fmt::Display for TemplateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.version, &self.hash[..12])
    }
}

/// Keeps at most `cap` characters from the end of `text`.
pub fn truncate_tail(text: &str, cap: usize) -> String {
    let count = text.chars().count();
    if count <= cap {
        return text.to_string();
    }
    let skip = count - cap;
    let start = text.char_indices().nth(skip).map(|(i, _)| i).unwrap_or(text.len());
    format!("{TRUNCATION_MARKER}{}", &text[start..])
}

#[derive(Debug, Clone)]
pub struct PromptBuilder {
    templates: TemplateSet,
    diagnostic_cap: usize,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder::new(TemplateSet::builtin())
    }
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet) -> Self {
        PromptBuilder { templates, diagnostic_cap: DEFAULT_DIAGNOSTIC_CAP }
    }

    pub fn with_diagnostic_cap(mut self, cap: usize) -> Self {
        self.diagnostic_cap = cap;
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn generation(&self, task: &Task, mode: PromptMode, num_tests: usize) -> Result<Conversation, PromptError> {
        if num_tests == 0 {
            return Err(PromptError::ZeroTests);
        }
        let mut b = base_bindings(task, num_tests);
        let template = match mode {
            PromptMode::Cot => {
                b.insert(Placeholder::GuidingExample, self.templates.guiding_example.trim_end().to_string());
                &self.templates.generate_cot
            }
            PromptMode::Plain => &self.templates.generate_plain,
        };
        self.conversation(template.render(&b)?)
    }

    /// Repair conversation for the last step of a trace.
    ///
    /// `last_valid` is the most recent successfully parsed artifact, which may
    /// predate `tail` when `tail` itself failed to parse. Without one there are
    /// no tests to keep fixed, so the tests-included form is used.
    pub fn repair(
        &self,
        task: &Task,
        tail: &TraceStep,
        last_valid: Option<&GenerationArtifact>,
        refine_tests: bool,
        num_tests: usize,
    ) -> Result<Conversation, PromptError> {
        if num_tests == 0 {
            return Err(PromptError::ZeroTests);
        }
        let feedback = self.feedback(tail)?;
        let mut b = base_bindings(task, num_tests);
        b.insert(
            Placeholder::PriorCode,
            last_valid
                .map(|a| a.code.trim_end().to_string())
                .unwrap_or_else(|| "# (no code was extracted from the previous response)".into()),
        );
        b.insert(Placeholder::ErrorFeedback, feedback);
        let with_tests = refine_tests || last_valid.is_none_or(|a| a.tests.is_empty());
        let template = if with_tests {
            b.insert(
                Placeholder::PriorTests,
                last_valid
                    .filter(|a| !a.tests.is_empty())
                    .map(|a| a.tests.join("\n"))
                    .unwrap_or_else(|| "# (no tests)".into()),
            );
            &self.templates.repair_tests
        } else {
            &self.templates.repair
        };
        self.conversation(template.render(&b)?)
    }

    /// Feedback text for a failed step. Diagnostics are capped, keeping the tail.
    pub fn feedback(&self, step: &TraceStep) -> Result<String, PromptError> {
        match (&step.artifact, &step.outcome) {
            (StepArtifact::ParseError { message }, _) => Ok(message.clone()),
            (StepArtifact::Parsed(_), None) => Err(PromptError::TailNotExecuted),
            (StepArtifact::Parsed(artifact), Some(outcome)) => {
                let diagnostic = truncate_tail(&outcome.diagnostic, self.diagnostic_cap);
                match outcome.class {
                    OutcomeClass::Pass => Err(PromptError::TailPassed),
                    OutcomeClass::AssertError => {
                        match outcome.failed_test_index.and_then(|i| artifact.tests.get(i)) {
                            Some(test) => Ok(format!("Failed test:\n{test}\n\n{diagnostic}")),
                            None => Ok(diagnostic),
                        }
                    }
                    OutcomeClass::SyntaxError => Ok(diagnostic),
                }
            }
        }
    }

    fn conversation(&self, user: String) -> Result<Conversation, PromptError> {
        Conversation::new(vec![
            Turn::system(self.templates.system.trim_end()),
            Turn::user(user),
        ])
    }
}

fn base_bindings(task: &Task, num_tests: usize) -> BTreeMap<Placeholder, String> {
    BTreeMap::from([
        (Placeholder::TaskPrompt, task.prompt.trim_end().to_string()),
        (Placeholder::EntryPoint, task.entry_point.clone()),
        (Placeholder::NumTests, num_tests.to_string()),
    ])
}
