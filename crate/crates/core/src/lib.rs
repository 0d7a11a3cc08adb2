//! Chain-of-thought code generation with a self-examination loop.
//!
//! A task is sent to a chat model with a reasoning prompt that also asks for a
//! handful of test assertions. The candidate is executed against those tests in
//! a subprocess, and execution errors are fed back for repair until the tests
//! pass or the step budget runs out. Final candidates are scored against the
//! hidden reference tests with pass@k and a two-bucket error breakdown.

pub mod dataset;
pub mod evaluator;
pub mod execution;
pub mod llm;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompting;
pub mod refine;

pub use evaluator::{EvalReport, ErrorDistribution, SweepRow, TaskResult};
pub use pipeline::{RunManifest, TraceRecord};

pub use dataset::{Dataset, DatasetFormat, Task};

pub use execution::{ExecutionBackend, ExecutionOutcome, Executor, ExecutorSpec, OutcomeClass};
pub use llm::{ChatClient, ModelConfig};
pub use prompting::{Conversation, PromptBuilder, PromptMode, Role, Turn};
pub use parser::GenerationArtifact;
pub use refine::{LoopConfig, LoopMode, RefinementTrace, Termination};

/// Scalar used for every reported rate.
pub type Rate = f64;

/// pass@k over the default [`Rate`] scalar.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<Rate, metrics::DomainError> {
    metrics::pass_at_k::<Rate>(n, c, k)
}
