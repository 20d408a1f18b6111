#![allow(dead_code)]

pub mod corpus;

use std::path::PathBuf;
use std::sync::Arc;

use propvis_core::fallback::{FallbackAnswerer, FixtureFallback};
use propvis_core::gateway::{Cassette, Gateway};
use propvis_core::pipeline::{ModelIds, Mode, Pipeline, RunConfig, TaskOutcome};
use propvis_core::sandbox::{ClassificationTable, ScriptedGuest, Supervisor};
use propvis_core::scripted::{build_entries, load_script, write_cassette, ScriptRecord};
use propvis_core::{load_suite, SuiteManifest, TestStyle};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scripted20() -> PathBuf {
    repo_root().join("fixtures/scripted20")
}

pub fn suite() -> SuiteManifest {
    load_suite(&scripted20().join("suite.jsonl")).expect("scripted suite loads")
}

pub fn script() -> Vec<ScriptRecord> {
    load_script(&scripted20().join("script.jsonl")).expect("script loads")
}

/// Replay-only gateway over a cassette built from `script`.
pub fn replay_gateway(manifest: &SuiteManifest, script: &[ScriptRecord], dir: &std::path::Path) -> Arc<Gateway> {
    let entries = build_entries(manifest, script, TestStyle::AdvancedVqa, &ModelIds::default()).unwrap();
    let path = dir.join("cassette.jsonl");
    write_cassette(&path, &entries).unwrap();
    Arc::new(Gateway::replay(Arc::new(Cassette::open_read_only(&path).unwrap())))
}

pub struct ModeRun {
    pub outcomes: Vec<TaskOutcome>,
    pub fallback_calls: u64,
}

pub fn run_with(manifest: &SuiteManifest, gateway: Arc<Gateway>, mode: Mode, parallelism: usize) -> ModeRun {
    let config = RunConfig {
        mode,
        parallelism,
        ..RunConfig::default()
    };
    let fallback = Arc::new(FixtureFallback::new(manifest.header.default_answer()));
    let supervisor = Supervisor::new(Arc::new(ScriptedGuest::default()), ClassificationTable::builtin());
    let pipeline = Pipeline::new(config, manifest.header.profile, gateway, supervisor, fallback.clone()).unwrap();
    let outcomes = pipeline.run_suite(manifest, |_, _| Ok(())).unwrap();
    ModeRun {
        outcomes,
        fallback_calls: fallback.calls(),
    }
}

pub fn run_mode(mode: Mode) -> ModeRun {
    let dir = tempfile::tempdir().unwrap();
    let manifest = suite();
    let gateway = replay_gateway(&manifest, &script(), dir.path());
    run_with(&manifest, gateway, mode, 4)
}
