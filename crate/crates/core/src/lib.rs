//! Core library of the PropTest harness: task suites, prompt rendering,
//! the completion gateway, the process supervisor, the pipeline and the
//! metrics that summarize a run.

pub mod extract;
pub mod fallback;
pub mod gateway;
pub mod guest_syntax;
pub mod metrics;
pub mod outcome;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod runlog;
pub mod sandbox;
pub mod scripted;
pub mod task;

pub use outcome::{ErrorClass, ErrorPhase, ExecutionOutcome, GuestError, Prediction};
pub use pipeline::{AnswerSource, Mode, Pipeline, RunConfig, TaskOutcome};
pub use prompt::{PromptBundle, PromptForge, TestStyle};
pub use task::{
    load_suite, sample_subset, AnswerKey, BoundingBox, DatasetProfile, SceneFixture, SuiteManifest,
    TaskKind, TaskRecord,
};
