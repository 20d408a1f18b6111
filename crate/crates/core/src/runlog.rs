//! On-disk run log: `run.json` describes the run, `runlog.jsonl` holds one
//! [`TaskOutcome`] per line in suite order, `timings.jsonl` the matching
//! wall-clock timings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{RunConfig, TaskOutcome, TaskTiming};

pub const MANIFEST_FILE: &str = "run.json";
pub const LOG_FILE: &str = "runlog.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub suite_name: String,
    pub suite_path: String,
    pub cassette_path: Option<String>,
    /// Subset size drawn with `config.seed`; absent for the whole suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    pub task_count: usize,
    pub classification_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification_path: Option<String>,
    /// External guest command; absent when the in-process double ran the programs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guest_command: Option<Vec<String>>,
    pub config: RunConfig,
}

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("run log is truncated: expected {expected} records, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("no task `{0}` in the run log")]
    UnknownTask(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunLogError + '_ {
    move |source| RunLogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends records as the pipeline produces them, flushing each line.
#[derive(Debug)]
pub struct RunLogWriter {
    dir: PathBuf,
    log: BufWriter<File>,
    timings: BufWriter<File>,
    written: usize,
}

impl RunLogWriter {
    /// Creates `dir` if needed and truncates any previous log in it.
    pub fn create(dir: &Path, manifest: &RunManifest) -> Result<Self, RunLogError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))?;
        let open = |name: &str| -> Result<BufWriter<File>, RunLogError> {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(io_err(&p))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            log: open(LOG_FILE)?,
            timings: open(TIMINGS_FILE)?,
            written: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn append(&mut self, outcome: &TaskOutcome, timing: &TaskTiming) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.log, outcome)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        serde_json::to_writer(&mut self.timings, timing)?;
        self.timings.write_all(b"\n")?;
        self.timings.flush()?;
        self.written += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub manifest: RunManifest,
    pub outcomes: Vec<TaskOutcome>,
}

impl RunLog {
    pub fn task(&self, id: &str) -> Result<&TaskOutcome, RunLogError> {
        self.outcomes
            .iter()
            .find(|o| o.task_id == id)
            .ok_or_else(|| RunLogError::UnknownTask(id.to_string()))
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, RunLogError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunLogError::Corrupt {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads a complete run log; a log with fewer records than the manifest
/// announces is rejected as truncated.
pub fn load_run(dir: &Path) -> Result<RunLog, RunLogError> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(LOG_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut outcomes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = serde_json::from_str(&line).map_err(|e| RunLogError::Corrupt {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        outcomes.push(outcome);
    }
    if outcomes.len() != manifest.task_count {
        return Err(RunLogError::Truncated {
            expected: manifest.task_count,
            found: outcomes.len(),
        });
    }
    Ok(RunLog { manifest, outcomes })
}
