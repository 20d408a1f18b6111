//! Sandbox supervisor: ships an assembled program to a guest, enforces the
//! time budget and turns the guest's reply into a classified outcome.
//!
//! The wire protocol is newline-delimited JSON over the guest's stdio, one
//! request and one reply per process. See `docs/protocol.md`.

mod double;
mod process;
pub mod pyexpr;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::outcome::{ErrorClass, ErrorPhase, ExecutionOutcome, GuestError, Prediction};
use crate::task::{BoundingBox, TaskKind};

pub use double::{HangMode, ScriptedGuest};
pub use process::ProcessSandbox;

pub const DEFAULT_TIME_BUDGET: Duration = Duration::from_secs(180);
pub const DEFAULT_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub program: String,
    pub kind: TaskKind,
    pub fixture_path: PathBuf,
    pub time_budget_s: f64,
}

impl ExecutionRequest {
    pub fn budget(&self) -> Duration {
        Duration::try_from_secs_f64(self.time_budget_s).unwrap_or(DEFAULT_TIME_BUDGET)
    }
}

/// A value as it travels on the wire: a string, a `[l, lo, r, u]` box, or null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireValue {
    Text(String),
    Box([f64; 4]),
    Null,
}

impl WireValue {
    /// `null` and malformed boxes become the task kind's sentinel.
    pub fn into_prediction(self, kind: TaskKind) -> Prediction {
        match self {
            WireValue::Text(t) => Prediction::Text(t),
            WireValue::Box(b) => {
                let b = BoundingBox::from(b);
                match b.validate() {
                    Ok(()) => Prediction::Box(b),
                    Err(_) => Prediction::NoBox,
                }
            }
            WireValue::Null => match kind {
                TaskKind::Vqa => Prediction::Text(String::new()),
                TaskKind::Grounding => Prediction::NoBox,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub phase: ErrorPhase,
    pub exception_name: String,
    pub message: String,
    #[serde(default)]
    pub traceback: String,
    #[serde(default)]
    pub timed_out: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<WireValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GuestReply {
    Ok { result: WireValue },
    Error(ErrorReply),
}

/// The reply the supervisor reports for a killed guest.
pub fn timeout_reply(budget: Duration) -> GuestReply {
    GuestReply::Error(ErrorReply {
        phase: ErrorPhase::Solution,
        exception_name: "TimeoutError".into(),
        message: format!("execution exceeded the {} s time budget", budget.as_secs_f64()),
        traceback: String::new(),
        timed_out: true,
        result: None,
    })
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to start guest `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("guest i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("guest exited ({status}) without replying; stderr: {stderr}")]
    NoReply { status: String, stderr: String },
    #[error("malformed guest reply `{line}`: {message}")]
    Malformed { line: String, message: String },
    #[error("guest could not load fixture: {0}")]
    Fixture(String),
}

/// Something that executes one request and returns the guest's raw reply.
pub trait Sandbox: Send + Sync {
    fn execute(&self, request: &ExecutionRequest) -> Result<GuestReply, SandboxError>;
}

impl<T: Sandbox + ?Sized> Sandbox for Arc<T> {
    fn execute(&self, request: &ExecutionRequest) -> Result<GuestReply, SandboxError> {
        (**self).execute(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<ErrorPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timed_out: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception_names: Option<Vec<String>>,
    pub class: ErrorClass,
}

impl ClassificationRule {
    fn matches(&self, reply: &ErrorReply) -> bool {
        self.phase.is_none_or(|p| p == reply.phase)
            && self.timed_out.is_none_or(|t| t == reply.timed_out)
            && self
                .exception_names
                .as_ref()
                .is_none_or(|names| names.iter().any(|n| *n == reply.exception_name))
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read classification table {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid classification table: {0}")]
    Invalid(#[from] serde_json::Error),
}

/// Ordered first-match rules mapping a guest error to an error class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationTable {
    pub version: String,
    pub rules: Vec<ClassificationRule>,
    pub default: ErrorClass,
}

const BUILTIN_TABLE: &str = include_str!("../../assets/classification.json");

impl ClassificationTable {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_TABLE).expect("built-in classification table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, TableError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn classify(&self, reply: &ErrorReply) -> ErrorClass {
        self.rules
            .iter()
            .find(|r| r.matches(reply))
            .map(|r| r.class)
            .unwrap_or(self.default)
    }
}

impl Default for ClassificationTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Runs programs through a [`Sandbox`] and classifies the replies.
#[derive(Clone)]
pub struct Supervisor {
    sandbox: Arc<dyn Sandbox>,
    table: ClassificationTable,
}

impl fmt::Debug for Supervisor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Supervisor")
            .field("table_version", &self.table.version)
            .finish()
    }
}

impl Supervisor {
    pub fn new(sandbox: Arc<dyn Sandbox>, table: ClassificationTable) -> Self {
        Self { sandbox, table }
    }

    pub fn table(&self) -> &ClassificationTable {
        &self.table
    }

    pub fn run(
        &self,
        program: &str,
        kind: TaskKind,
        fixture_path: &Path,
        budget: Duration,
    ) -> Result<ExecutionOutcome, SandboxError> {
        let request = ExecutionRequest {
            program: program.to_string(),
            kind,
            fixture_path: fixture_path.to_path_buf(),
            time_budget_s: budget.as_secs_f64(),
        };
        let reply = self.sandbox.execute(&request)?;
        Ok(self.outcome(reply, kind))
    }

    pub fn outcome(&self, reply: GuestReply, kind: TaskKind) -> ExecutionOutcome {
        match reply {
            GuestReply::Ok { result } => ExecutionOutcome::Ok {
                value: result.into_prediction(kind),
            },
            GuestReply::Error(err) => {
                let class = self.table.classify(&err);
                ExecutionOutcome::Error(GuestError {
                    class,
                    phase: err.phase,
                    exception_name: err.exception_name,
                    message: err.message,
                    traceback: err.traceback,
                    timed_out: err.timed_out,
                    result: err.result.map(|r| r.into_prediction(kind)),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(phase: ErrorPhase, name: &str, timed_out: bool) -> ErrorReply {
        ErrorReply {
            phase,
            exception_name: name.into(),
            message: String::new(),
            traceback: String::new(),
            timed_out,
            result: None,
        }
    }

    #[test]
    fn builtin_rules_in_order() {
        let t = ClassificationTable::builtin();
        assert_eq!(t.classify(&err(ErrorPhase::Parse, "SyntaxError", false)), ErrorClass::Syntax);
        assert_eq!(t.classify(&err(ErrorPhase::Parse, "AssertionError", false)), ErrorClass::Syntax);
        assert_eq!(t.classify(&err(ErrorPhase::Test, "AssertionError", true)), ErrorClass::Runtime);
        assert_eq!(t.classify(&err(ErrorPhase::Test, "AssertionError", false)), ErrorClass::Assertion);
        assert_eq!(t.classify(&err(ErrorPhase::Solution, "AssertionError", false)), ErrorClass::Runtime);
        assert_eq!(t.classify(&err(ErrorPhase::Solution, "IndexError", false)), ErrorClass::Runtime);
        assert_eq!(t.classify(&err(ErrorPhase::Solution, "Whatever", false)), ErrorClass::Runtime);
    }

    #[test]
    fn table_can_be_overridden() {
        let t = ClassificationTable::from_json(
            r#"{"version":"x","rules":[{"exception_names":["KeyError"],"class":"syntax"}],"default":"assertion"}"#,
        )
        .unwrap();
        assert_eq!(t.classify(&err(ErrorPhase::Solution, "KeyError", false)), ErrorClass::Syntax);
        assert_eq!(t.classify(&err(ErrorPhase::Solution, "IndexError", false)), ErrorClass::Assertion);
    }

    #[test]
    fn reply_wire_format() {
        let ok: GuestReply = serde_json::from_str(r#"{"status":"ok","result":"cat"}"#).unwrap();
        assert_eq!(ok, GuestReply::Ok { result: WireValue::Text("cat".into()) });
        let b: GuestReply = serde_json::from_str(r#"{"status":"ok","result":[1,2,3,4]}"#).unwrap();
        assert_eq!(b, GuestReply::Ok { result: WireValue::Box([1.0, 2.0, 3.0, 4.0]) });
        let n: GuestReply = serde_json::from_str(r#"{"status":"ok","result":null}"#).unwrap();
        assert_eq!(n, GuestReply::Ok { result: WireValue::Null });
        let e: GuestReply = serde_json::from_str(
            r#"{"status":"error","phase":"test","exception_name":"AssertionError","message":"","result":"3"}"#,
        )
        .unwrap();
        match e {
            GuestReply::Error(e) => {
                assert_eq!(e.result, Some(WireValue::Text("3".into())));
                assert!(!e.timed_out);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn null_and_inverted_boxes_become_sentinels() {
        assert_eq!(WireValue::Null.into_prediction(TaskKind::Grounding), Prediction::NoBox);
        assert_eq!(WireValue::Null.into_prediction(TaskKind::Vqa), Prediction::Text(String::new()));
        assert_eq!(
            WireValue::Box([5.0, 0.0, 1.0, 1.0]).into_prediction(TaskKind::Grounding),
            Prediction::NoBox
        );
    }
}
