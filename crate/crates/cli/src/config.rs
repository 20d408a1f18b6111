//! TOML run configuration merged with command-line overrides.
//!
//! ```toml
//! suite = "fixtures/scripted20/suite.jsonl"
//! cassette = "fixtures/scripted20/cassette.jsonl"
//! out = "runs/proptest"
//! mode = "proptest"
//! test_style = "advanced_vqa"
//! gateway = "replay_only"
//! timeout_secs = 180
//! parallelism = 4
//! sample = 10
//! seed = 0
//! plot = false
//! evaluate_tests = true
//!
//! [models]
//! test_gen = "meta-llama/Meta-Llama-3-8B-Instruct"
//! code_gen = "meta-llama/Meta-Llama-3-8B-Instruct"
//! knowledge = "meta-llama/Meta-Llama-3-8B-Instruct"
//!
//! [guest]
//! command = ["python3", "guest.py"]
//!
//! [provider]
//! base_url = "http://localhost:8000/v1"
//! request_timeout_secs = 120
//! ```
//!
//! The provider key and base URL can also come from `PROPVIS_API_KEY` and
//! `PROPVIS_BASE_URL`; the environment wins over the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use propvis_core::gateway::GatewayMode;
use propvis_core::pipeline::ModelIds;
use propvis_core::{Mode, RunConfig, TestStyle};
use serde::Deserialize;

use crate::args::RunArgs;
use crate::exit::{CliResult, ExitKind, Failure, OrExit};

pub const API_KEY_ENV: &str = "PROPVIS_API_KEY";
pub const BASE_URL_ENV: &str = "PROPVIS_BASE_URL";
pub const DEFAULT_OUT: &str = "propvis-run";
const DEFAULT_REQUEST_TIMEOUT_SECS: f64 = 120.0;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub suite: Option<PathBuf>,
    pub cassette: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub test_style: Option<TestStyle>,
    pub gateway: Option<GatewayMode>,
    pub timeout_secs: Option<f64>,
    pub parallelism: Option<usize>,
    pub sample: Option<usize>,
    pub seed: Option<u64>,
    pub plot: Option<bool>,
    pub evaluate_tests: Option<bool>,
    pub classification: Option<PathBuf>,
    pub models: Option<ModelIds>,
    pub guest: Option<GuestConfig>,
    pub provider: Option<ProviderConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestConfig {
    pub command: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: Option<String>,
    pub request_timeout_secs: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::msg(ExitKind::Config, format!("{}: {e}", path.display())))?;
        let mut config: FileConfig = toml::from_str(&text)
            .map_err(|e| Failure::msg(ExitKind::Config, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.suite, &mut config.cassette, &mut config.out, &mut config.classification]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSettings {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub request_timeout: Duration,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub suite: PathBuf,
    pub cassette: Option<PathBuf>,
    pub out: PathBuf,
    pub sample: Option<usize>,
    pub plot: bool,
    pub classification: Option<PathBuf>,
    pub guest: Option<Vec<String>>,
    pub provider: ProviderSettings,
    pub config: RunConfig,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

/// Merges `args` over the config file they name and validates the result.
pub fn resolve(args: &RunArgs) -> CliResult<RunPlan> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let defaults = RunConfig::default();
    let config = RunConfig {
        mode: args.mode.or(file.mode).unwrap_or(defaults.mode),
        test_style: args.test_style.or(file.test_style).unwrap_or(defaults.test_style),
        gateway_mode: args.gateway.or(file.gateway).unwrap_or(defaults.gateway_mode),
        timeout_seconds: args.timeout_secs.or(file.timeout_secs).unwrap_or(defaults.timeout_seconds),
        parallelism: args.parallelism.or(file.parallelism).unwrap_or(defaults.parallelism),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        models: file.models.clone().unwrap_or_default(),
        evaluate_tests: file.evaluate_tests.unwrap_or(defaults.evaluate_tests),
    };
    config.validate().or_exit(ExitKind::Config)?;

    let suite = args
        .suite
        .clone()
        .or(file.suite.clone())
        .ok_or_else(|| Failure::msg(ExitKind::Config, "no suite given (--suite or `suite` in the config)"))?;
    let guest = match &args.guest {
        Some(cmd) => Some(cmd.split_whitespace().map(str::to_string).collect::<Vec<_>>()),
        None => file.guest.as_ref().map(|g| g.command.clone()),
    };
    if guest.as_ref().is_some_and(|g| g.is_empty()) {
        return Err(Failure::msg(ExitKind::Config, "guest command is empty"));
    }
    let sample = args.sample.or(file.sample);
    if sample == Some(0) {
        return Err(Failure::msg(ExitKind::Config, "sample size must be at least 1"));
    }
    let provider_file = file.provider.clone().unwrap_or_default();
    let request_timeout = provider_file
        .request_timeout_secs
        .unwrap_or(DEFAULT_REQUEST_TIMEOUT_SECS);
    let request_timeout = Duration::try_from_secs_f64(request_timeout)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| Failure::msg(ExitKind::Config, "provider.request_timeout_secs must be positive"))?;

    Ok(RunPlan {
        suite,
        cassette: args.cassette.clone().or(file.cassette.clone()),
        out: args
            .out
            .clone()
            .or(file.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        sample,
        plot: args.plot || file.plot.unwrap_or(false),
        classification: args.classification.clone().or(file.classification.clone()),
        guest,
        provider: ProviderSettings {
            base_url: env_var(BASE_URL_ENV).or(provider_file.base_url),
            api_key: env_var(API_KEY_ENV),
            request_timeout,
        },
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args() -> RunArgs {
        RunArgs {
            suite: Some("suite.jsonl".into()),
            ..RunArgs::default()
        }
    }

    #[test]
    fn defaults_apply() {
        let plan = resolve(&args()).unwrap();
        assert_eq!(plan.config, RunConfig::default());
        assert_eq!(plan.out, PathBuf::from(DEFAULT_OUT));
        assert_eq!(plan.guest, None);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "suite = \"s.jsonl\"\nmode = \"baseline\"\nparallelism = 3\ntimeout_secs = 30\n\
             [guest]\ncommand = [\"guest\", \"--x\"]\n[models]\ncode_gen = \"m\"\n",
        )
        .unwrap();
        let plan = resolve(&RunArgs {
            config: Some(path),
            mode: Some(Mode::Proptest),
            ..RunArgs::default()
        })
        .unwrap();
        assert_eq!(plan.suite, dir.path().join("s.jsonl"));
        assert_eq!(plan.config.mode, Mode::Proptest);
        assert_eq!(plan.config.parallelism, 3);
        assert_eq!(plan.config.timeout_seconds, 30.0);
        assert_eq!(plan.config.models.code_gen, "m");
        assert_eq!(plan.guest, Some(vec!["guest".to_string(), "--x".to_string()]));
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        for bad in [
            RunArgs {
                timeout_secs: Some(0.0),
                ..args()
            },
            RunArgs {
                parallelism: Some(0),
                ..args()
            },
            RunArgs {
                sample: Some(0),
                ..args()
            },
            RunArgs {
                suite: None,
                ..args()
            },
        ] {
            assert_eq!(resolve(&bad).unwrap_err().kind, ExitKind::Config);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "suite = \"s\"\ntimeout = 3\n").unwrap();
        let err = resolve(&RunArgs {
            config: Some(path),
            ..RunArgs::default()
        })
        .unwrap_err();
        assert_eq!(err.kind, ExitKind::Config);
    }
}
