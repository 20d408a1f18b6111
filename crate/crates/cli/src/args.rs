//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use propvis_core::gateway::GatewayMode;
use propvis_core::{Mode, TestStyle};

#[derive(Debug, Parser)]
#[command(name = "propvis", version, about = "Property-test-guided visual program synthesis harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a suite and write its run log and report.
    Run(RunArgs),
    /// Re-run a recorded run from its cassette and check the log is unchanged.
    Replay(ReplayArgs),
    /// Render tables from one or more run logs.
    Report(ReportArgs),
    /// Dump everything stored for one task.
    Inspect(InspectArgs),
    /// Serve one execution request on stdin/stdout with the scripted guest.
    GuestDouble(GuestDoubleArgs),
    /// Turn a script of hand-written completions into a replay cassette.
    ScriptToCassette(ScriptArgs),
}

/// Every flag overrides the matching key of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config file; relative paths in it resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Suite manifest (JSONL).
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Cassette file for replay or recording.
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// baseline, proptest, proptest_no_test_exec or proptest_no_fallback.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// basic_vqa, advanced_vqa or grounding; grounding tasks always use grounding.
    #[arg(long)]
    pub test_style: Option<TestStyle>,
    /// live, cache_then_live or replay_only.
    #[arg(long)]
    pub gateway: Option<GatewayMode>,
    /// Per-program time budget in seconds (default 180).
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    /// Run a random subset of N tasks.
    #[arg(long, value_name = "N")]
    pub sample: Option<usize>,
    /// Seed for `--sample` (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tasks evaluated concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Output directory for the run log and the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also draw the score chart.
    #[arg(long)]
    pub plot: bool,
    /// External guest command line; the in-process scripted guest is used otherwise.
    #[arg(long, value_name = "CMD")]
    pub guest: Option<String>,
    /// Classification table replacing the built-in one.
    #[arg(long)]
    pub classification: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Directory of the run to repeat.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the repeated run (default: RUN/replay).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also draw the score chart.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories; several runs of one suite fill the mode matrix.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory (default: FIRST_RUN/report).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also draw the score chart.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Task id, e.g. `t01`.
    #[arg(long)]
    pub task: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GuestDoubleArgs {
    /// Block on `hang` directives instead of answering with a timeout.
    #[arg(long)]
    pub block_on_hang: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScriptArgs {
    /// Suite manifest the prompts are rendered for.
    #[arg(long)]
    pub suite: PathBuf,
    /// JSONL of hand-written completions, one record per task.
    #[arg(long)]
    pub script: PathBuf,
    /// Cassette to write; an existing file is replaced.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "advanced_vqa")]
    pub test_style: TestStyle,
}
