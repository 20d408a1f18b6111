//! The subcommands. Each returns a summary for `main` to print, or a
//! [`Failure`] carrying its exit code.

use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use propvis_core::fallback::FixtureFallback;
use propvis_core::gateway::{Cassette, Gateway, GatewayMode, HttpProvider};
use propvis_core::metrics::{error_breakdown, mean, ErrorBreakdown};
use propvis_core::pipeline::{AnswerSource, InfraStage, Pipeline, TaskOutcome};
use propvis_core::report::{build_report, write_report};
use propvis_core::runlog::{load_run, read_manifest, RunLog, RunLogWriter, RunManifest, LOG_FILE};
use propvis_core::sandbox::{ClassificationTable, HangMode, ProcessSandbox, Sandbox, ScriptedGuest, Supervisor};
use propvis_core::scripted::{build_entries, load_script, write_cassette};
use propvis_core::{load_suite, sample_subset};

use crate::args::{GuestDoubleArgs, InspectArgs, ReplayArgs, ReportArgs, RunArgs, ScriptArgs};
use crate::config::{resolve, RunPlan};
use crate::exit::{CliResult, ExitKind, Failure, OrExit};
use crate::inspect::render_task;

/// Report directory inside a run directory.
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub task_count: usize,
    pub mean_score: Option<f64>,
    pub breakdown: ErrorBreakdown,
    pub generated: usize,
    pub fallback: usize,
    pub none: usize,
    pub report_files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn render(&self) -> String {
        let b = &self.breakdown;
        let score = self.mean_score.map_or("-".to_string(), |s| format!("{s:.4}"));
        format!(
            "tasks: {}  mean score: {score}\n\
             errors: {} (assertion {}, runtime {}, syntax {})  infrastructure: {}\n\
             answers: generated {}, fallback {}, none {}\n\
             run log: {}\n\
             report: {} ({} files)\n",
            self.task_count,
            b.total_errors,
            b.assertion,
            b.runtime,
            b.syntax,
            b.infrastructure,
            self.generated,
            self.fallback,
            self.none,
            self.out.join(LOG_FILE).display(),
            self.out.join(REPORT_DIR).display(),
            self.report_files.len(),
        )
    }
}

fn build_gateway(plan: &RunPlan) -> CliResult<Gateway> {
    let mode = plan.config.gateway_mode;
    if mode == GatewayMode::ReplayOnly {
        let path = plan
            .cassette
            .as_ref()
            .ok_or_else(|| Failure::msg(ExitKind::Config, "replay_only needs a cassette (--cassette)"))?;
        if !path.is_file() {
            return Err(Failure::msg(
                ExitKind::Gateway,
                format!("cassette {} does not exist", path.display()),
            ));
        }
        let cassette = Cassette::open_read_only(path).or_exit(ExitKind::Gateway)?;
        return Ok(Gateway::replay(Arc::new(cassette)));
    }
    let base_url = plan.provider.base_url.as_deref().ok_or_else(|| {
        Failure::msg(
            ExitKind::Config,
            format!("gateway {} needs a provider base URL (PROPVIS_BASE_URL or provider.base_url)", mode.name()),
        )
    })?;
    let provider = HttpProvider::new(base_url, plan.provider.api_key.clone(), plan.provider.request_timeout)
        .or_exit(ExitKind::Gateway)?;
    let cassette = match &plan.cassette {
        Some(path) => Some(Arc::new(Cassette::open(path).or_exit(ExitKind::Gateway)?)),
        None => None,
    };
    Ok(Gateway::new(mode, Some(Box::new(provider)), cassette))
}

fn build_supervisor(plan: &RunPlan) -> CliResult<Supervisor> {
    let table = match &plan.classification {
        Some(path) => ClassificationTable::load(path).or_exit(ExitKind::Config)?,
        None => ClassificationTable::builtin(),
    };
    let sandbox: Arc<dyn Sandbox> = match &plan.guest {
        Some(cmd) => Arc::new(ProcessSandbox::new(&cmd[0], cmd[1..].to_vec())),
        None => Arc::new(ScriptedGuest::default()),
    };
    Ok(Supervisor::new(sandbox, table))
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// The exit code a finished run should produce: the first infrastructure
/// failure decides, gateway problems before sandbox problems.
fn infrastructure_failure(outcomes: &[TaskOutcome]) -> Option<Failure> {
    let failed: Vec<_> = outcomes
        .iter()
        .filter_map(|o| o.infrastructure_error.as_ref().map(|e| (o, e)))
        .collect();
    let pick = |stages: &[InfraStage]| failed.iter().find(|(_, e)| stages.contains(&e.stage));
    let (kind, hit) = [
        (ExitKind::Gateway, pick(&[InfraStage::Gateway, InfraStage::Fallback])),
        (ExitKind::Sandbox, pick(&[InfraStage::Sandbox])),
        (ExitKind::Data, pick(&[InfraStage::Prompt, InfraStage::Fixture, InfraStage::Assembly])),
    ]
    .into_iter()
    .find_map(|(k, hit)| hit.map(|h| (k, h)))?;
    let (outcome, error) = hit;
    Some(Failure::msg(
        kind,
        format!(
            "{} of {} tasks hit infrastructure failures; first: task {}: {error}",
            failed.len(),
            outcomes.len(),
            outcome.task_id
        ),
    ))
}

fn execute(plan: &RunPlan) -> CliResult<RunSummary> {
    let full = load_suite(&plan.suite).or_exit(ExitKind::Data)?;
    let manifest = match plan.sample {
        Some(n) => sample_subset(&full, n, plan.config.seed).or_exit(ExitKind::Data)?,
        None => full,
    };
    let supervisor = build_supervisor(plan)?;
    let gateway = Arc::new(build_gateway(plan)?);
    let fallback = Arc::new(FixtureFallback::new(manifest.header.default_answer()));
    let classification_version = supervisor.table().version.clone();
    let pipeline = Pipeline::new(plan.config.clone(), manifest.header.profile, gateway, supervisor, fallback)
        .or_exit(ExitKind::Config)?;

    let record = RunManifest {
        suite_name: manifest.header.name.clone(),
        suite_path: path_string(&plan.suite),
        cassette_path: plan.cassette.as_deref().map(path_string),
        sample: plan.sample,
        task_count: manifest.len(),
        classification_version,
        classification_path: plan.classification.as_deref().map(path_string),
        guest_command: plan.guest.clone(),
        config: plan.config.clone(),
    };
    let mut writer = RunLogWriter::create(&plan.out, &record).or_exit(ExitKind::Output)?;
    let total = manifest.len();
    let outcomes = pipeline
        .run_suite(&manifest, |outcome, timing| {
            writer.append(outcome, timing)?;
            tracing::info!(
                task = %outcome.task_id,
                done = writer.written(),
                total,
                source = outcome.answer_source.name(),
                ms = timing.total_ms,
                "task finished"
            );
            Ok(())
        })
        .or_exit(ExitKind::Output)?;
    drop(writer);

    let log = RunLog {
        manifest: record,
        outcomes,
    };
    let report_files = write_report(&build_report(std::slice::from_ref(&log)), &plan.out.join(REPORT_DIR), plan.plot)
        .or_exit(ExitKind::Output)?;
    let outcomes = &log.outcomes;
    let count = |s: AnswerSource| outcomes.iter().filter(|o| o.answer_source == s).count();
    let summary = RunSummary {
        out: plan.out.clone(),
        task_count: outcomes.len(),
        mean_score: mean(&outcomes.iter().map(|o| o.score).collect::<Vec<_>>()),
        breakdown: error_breakdown(outcomes.iter().map(|o| o.tally())),
        generated: count(AnswerSource::Generated),
        fallback: count(AnswerSource::Fallback),
        none: count(AnswerSource::None),
        report_files,
    };
    match infrastructure_failure(outcomes) {
        Some(f) => Err(f),
        None => Ok(summary),
    }
}

pub fn cmd_run(args: &RunArgs) -> CliResult<RunSummary> {
    execute(&resolve(args)?)
}

#[derive(Debug, Clone)]
pub struct ReplaySummary {
    pub run: RunSummary,
    pub original: PathBuf,
}

/// Repeats a recorded run from its cassette and compares the run logs byte for byte.
pub fn cmd_replay(args: &ReplayArgs) -> CliResult<ReplaySummary> {
    let original = load_run(&args.run).or_exit(ExitKind::Data)?;
    let m = &original.manifest;
    let cassette = m
        .cassette_path
        .as_ref()
        .ok_or_else(|| Failure::msg(ExitKind::Data, "the run recorded no cassette, so it cannot be replayed"))?;
    let mut config = m.config.clone();
    config.gateway_mode = GatewayMode::ReplayOnly;
    let plan = RunPlan {
        suite: PathBuf::from(&m.suite_path),
        cassette: Some(PathBuf::from(cassette)),
        out: args.out.clone().unwrap_or_else(|| args.run.join("replay")),
        sample: m.sample,
        plot: args.plot,
        classification: m.classification_path.as_ref().map(PathBuf::from),
        guest: m.guest_command.clone(),
        provider: crate::config::ProviderSettings {
            base_url: None,
            api_key: None,
            request_timeout: std::time::Duration::from_secs(1),
        },
        config,
    };
    let run = execute(&plan)?;
    let before = fs::read(args.run.join(LOG_FILE)).or_exit(ExitKind::Data)?;
    let after = fs::read(plan.out.join(LOG_FILE)).or_exit(ExitKind::Output)?;
    if before != after {
        let first = before
            .split(|&b| b == b'\n')
            .zip(after.split(|&b| b == b'\n'))
            .position(|(a, b)| a != b)
            .map_or("length".to_string(), |i| format!("line {}", i + 1));
        return Err(Failure::msg(
            ExitKind::ReplayDiverged,
            format!("{} differs from the original at {first}", plan.out.join(LOG_FILE).display()),
        ));
    }
    Ok(ReplaySummary {
        run,
        original: args.run.clone(),
    })
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<Vec<PathBuf>> {
    let runs = args
        .runs
        .iter()
        .map(|dir| load_run(dir).or_exit(ExitKind::Data))
        .collect::<CliResult<Vec<_>>>()?;
    let out = args.out.clone().unwrap_or_else(|| args.runs[0].join(REPORT_DIR));
    write_report(&build_report(&runs), &out, args.plot).or_exit(ExitKind::Output)
}

pub fn cmd_inspect(args: &InspectArgs) -> CliResult<String> {
    let manifest = read_manifest(&args.run).or_exit(ExitKind::Data)?;
    let log = load_run(&args.run).or_exit(ExitKind::Data)?;
    let outcome = log.task(&args.task).or_exit(ExitKind::Data)?;
    Ok(render_task(&manifest, outcome))
}

pub fn cmd_guest_double(args: &GuestDoubleArgs) -> CliResult<()> {
    let hang = if args.block_on_hang {
        HangMode::Block
    } else {
        HangMode::Report
    };
    ScriptedGuest::new(hang)
        .serve(BufReader::new(io::stdin().lock()), io::stdout().lock())
        .or_exit(ExitKind::Sandbox)
}

pub fn cmd_script_to_cassette(args: &ScriptArgs) -> CliResult<usize> {
    let manifest = load_suite(&args.suite).or_exit(ExitKind::Data)?;
    let script = load_script(&args.script).or_exit(ExitKind::Data)?;
    let entries = build_entries(&manifest, &script, args.test_style, &Default::default()).or_exit(ExitKind::Data)?;
    write_cassette(&args.out, &entries).or_exit(ExitKind::Output)?;
    Ok(entries.len())
}
