#![allow(dead_code)]

use std::path::{Path, PathBuf};

use propvis_cli::args::RunArgs;
use propvis_core::gateway::GatewayMode;
use propvis_core::{Mode, TestStyle};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scripted20() -> PathBuf {
    repo_root().join("fixtures/scripted20")
}

/// Replay-only run of the scripted suite against the committed cassette.
pub fn scripted_args(mode: Mode, out: &Path) -> RunArgs {
    RunArgs {
        suite: Some(scripted20().join("suite.jsonl")),
        cassette: Some(scripted20().join("cassette.jsonl")),
        mode: Some(mode),
        test_style: Some(TestStyle::AdvancedVqa),
        gateway: Some(GatewayMode::ReplayOnly),
        parallelism: Some(4),
        out: Some(out.to_path_buf()),
        ..RunArgs::default()
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Relative path -> bytes for every file under `dir`.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}
