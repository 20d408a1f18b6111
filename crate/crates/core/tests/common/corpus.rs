//! The crafted classifier corpus: each case is a program pair run through
//! the protocol double, a raw completion run through extraction, or a raw
//! guest reply.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use propvis_core::extract::extract_function;
use propvis_core::outcome::{ErrorClass, ExecutionOutcome};
use propvis_core::pipeline::{assemble_program, parse_failure_reply, SOLUTION_FUNCTION};
use propvis_core::sandbox::{ClassificationTable, ErrorReply, GuestReply, ScriptedGuest, Supervisor};
use propvis_core::TaskKind;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct CorpusCase {
    pub id: String,
    pub expected: ErrorClass,
    pub note: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub test: Option<String>,
    #[serde(default)]
    pub solution: Option<String>,
    #[serde(default)]
    pub completion: Option<String>,
    #[serde(default)]
    pub reply: Option<ErrorReply>,
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

pub fn load_corpus() -> Vec<CorpusCase> {
    let text = std::fs::read_to_string(data_dir().join("classifier_corpus.jsonl")).unwrap();
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Class assigned to `case`, or `None` if it ran clean.
pub fn classify_case(case: &CorpusCase) -> Option<ErrorClass> {
    let supervisor = Supervisor::new(Arc::new(ScriptedGuest::default()), ClassificationTable::builtin());
    let fixture = data_dir().join("corpus_scene.json");
    let budget = Duration::from_secs(180);
    let run = |solution: &str| {
        let program = assemble_program(case.test.as_deref(), solution).unwrap();
        supervisor.run(&program, case.kind, &fixture, budget).unwrap()
    };
    let outcome = if let Some(reply) = &case.reply {
        supervisor.outcome(GuestReply::Error(reply.clone()), case.kind)
    } else if let Some(completion) = &case.completion {
        match extract_function(completion, SOLUTION_FUNCTION) {
            Ok(f) => run(&f.source),
            Err(e) => supervisor.outcome(GuestReply::Error(parse_failure_reply(&e)), case.kind),
        }
    } else {
        run(case.solution.as_deref().expect("case has a solution"))
    };
    match outcome {
        ExecutionOutcome::Ok { .. } => None,
        ExecutionOutcome::Error(e) => Some(e.class),
    }
}
