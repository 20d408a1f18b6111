//! Values shared by the supervisor, the pipeline and the scorers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::task::BoundingBox;

/// A produced answer: text for vqa, a box for grounding.
///
/// `NoBox` is the zero-area sentinel emitted when a grounding task ends
/// without any usable box; it always scores zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Text(String),
    #[serde(rename = "box")]
    Box(BoundingBox),
    NoBox,
}

impl Prediction {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Prediction::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_box(&self) -> Option<&BoundingBox> {
        match self {
            Prediction::Box(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prediction::Text(t) => write!(f, "{t:?}"),
            Prediction::Box(b) => write!(f, "[{}, {}, {}, {}]", b.left, b.lower, b.right, b.upper),
            Prediction::NoBox => f.write_str("<no box>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Assertion,
    Runtime,
    Syntax,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 3] = [ErrorClass::Assertion, ErrorClass::Runtime, ErrorClass::Syntax];

    pub fn name(&self) -> &'static str {
        match self {
            ErrorClass::Assertion => "assertion",
            ErrorClass::Runtime => "runtime",
            ErrorClass::Syntax => "syntax",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where in the assembled program a guest error surfaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPhase {
    Parse,
    Solution,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuestError {
    pub class: ErrorClass,
    pub phase: ErrorPhase,
    pub exception_name: String,
    pub message: String,
    #[serde(default)]
    pub traceback: String,
    #[serde(default)]
    pub timed_out: bool,
    /// Value the solution produced before a test-phase error, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Prediction>,
}

/// Result of one sandboxed execution, already classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Ok { value: Prediction },
    Error(GuestError),
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, ExecutionOutcome::Ok { .. })
    }

    pub fn error(&self) -> Option<&GuestError> {
        match self {
            ExecutionOutcome::Error(e) => Some(e),
            ExecutionOutcome::Ok { .. } => None,
        }
    }

    pub fn error_class(&self) -> Option<ErrorClass> {
        self.error().map(|e| e.class)
    }

    /// The solution's value, including one that a test later rejected.
    pub fn solution_value(&self) -> Option<&Prediction> {
        match self {
            ExecutionOutcome::Ok { value } => Some(value),
            ExecutionOutcome::Error(e) => e.result.as_ref(),
        }
    }
}
