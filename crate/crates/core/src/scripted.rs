//! Builds a replay cassette from hand-written completions, so a suite can
//! be run end to end without any model.
//!
//! A script is JSONL, one record per task:
//! `{"task_id", "test_completion"?, "code_completion", "baseline_code_completion"?}`.
//! The builder renders exactly the prompts the pipeline will render and
//! records each completion under the matching request key.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::extract_function;
use crate::gateway::{CassetteEntry, CompletionRequest, GENERATION};
use crate::pipeline::{ModelIds, TEST_FUNCTION};
use crate::prompt::{PromptError, PromptForge, TestStyle};
use crate::task::SuiteManifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub task_id: String,
    /// Absent: no test completion is recorded and test generation misses.
    #[serde(default)]
    pub test_completion: Option<String>,
    pub code_completion: String,
    /// Completion for the test-free prompt; defaults to `code_completion`.
    #[serde(default)]
    pub baseline_code_completion: Option<String>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("script names unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is scripted twice")]
    Duplicate(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("task `{0}`: two different completions for the same request")]
    Conflict(String),
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptRecord>, ScriptError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| ScriptError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Cassette entries for `script`, in suite order.
pub fn build_entries(
    manifest: &SuiteManifest,
    script: &[ScriptRecord],
    style: TestStyle,
    models: &ModelIds,
) -> Result<Vec<CassetteEntry>, ScriptError> {
    let mut by_task: BTreeMap<&str, &ScriptRecord> = BTreeMap::new();
    for rec in script {
        if manifest.task(&rec.task_id).is_none() {
            return Err(ScriptError::UnknownTask(rec.task_id.clone()));
        }
        if by_task.insert(&rec.task_id, rec).is_some() {
            return Err(ScriptError::Duplicate(rec.task_id.clone()));
        }
    }

    let forge = PromptForge::new(manifest.header.profile);
    let mut entries: Vec<CassetteEntry> = Vec::new();
    let mut push = |task_id: &str, request: CompletionRequest, completion: &str| -> Result<(), ScriptError> {
        let key = request.key();
        if let Some(existing) = entries.iter().find(|e| e.key == key) {
            if existing.completion != completion {
                return Err(ScriptError::Conflict(task_id.to_string()));
            }
            return Ok(());
        }
        entries.push(CassetteEntry {
            key,
            request_digest_inputs: request,
            completion: completion.to_string(),
            metadata: serde_json::json!({ "provider": "script", "task_id": task_id }),
        });
        Ok(())
    };

    for task in &manifest.tasks {
        let Some(rec) = by_task.get(task.id.as_str()) else {
            continue;
        };
        let mut test_source = None;
        if let Some(test) = &rec.test_completion {
            let bundle = forge.render_test_prompt(task, style.effective_for(task.kind))?;
            push(&task.id, CompletionRequest::from_bundle(&models.test_gen, &bundle, GENERATION), test)?;
            test_source = extract_function(test, TEST_FUNCTION).ok().map(|f| f.source);
        }
        let code = forge.render_code_prompt(task, test_source.as_deref())?;
        push(
            &task.id,
            CompletionRequest::from_bundle(&models.code_gen, &code, GENERATION),
            &rec.code_completion,
        )?;
        let baseline = forge.render_code_prompt(task, None)?;
        let baseline_text = rec.baseline_code_completion.as_ref().unwrap_or(&rec.code_completion);
        push(
            &task.id,
            CompletionRequest::from_bundle(&models.code_gen, &baseline, GENERATION),
            baseline_text,
        )?;
    }
    Ok(entries)
}

/// Writes `entries` as a fresh cassette file.
pub fn write_cassette(path: &Path, entries: &[CassetteEntry]) -> Result<(), ScriptError> {
    let io = |source| ScriptError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("entry serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io)
}
