//! The per-task algorithm (tests, then test-conditioned code, then a
//! supervised run of both, then fallback) and the suite driver.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{extract_function, ExtractError};
use crate::fallback::FallbackAnswerer;
use crate::gateway::{CompletionRequest, Gateway, GatewayMode, DEFAULT_MODEL, GENERATION};
use crate::metrics::{self, TestVerdict};
use crate::outcome::{ErrorClass, ErrorPhase, ExecutionOutcome, Prediction};
use crate::prompt::{PromptBundle, PromptForge, TestStyle};
use crate::sandbox::{ErrorReply, GuestReply, Supervisor};
use crate::task::{AnswerKey, DatasetProfile, FixtureRef, SuiteManifest, TaskKind, TaskRecord};

pub const DEFAULT_TIMEOUT_SECONDS: f64 = 180.0;
pub const TEST_FUNCTION: &str = "execute_test";
pub const SOLUTION_FUNCTION: &str = "execute_command";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Proptest,
    ProptestNoTestExec,
    ProptestNoFallback,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Baseline,
        Mode::Proptest,
        Mode::ProptestNoTestExec,
        Mode::ProptestNoFallback,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Proptest => "proptest",
            Mode::ProptestNoTestExec => "proptest_no_test_exec",
            Mode::ProptestNoFallback => "proptest_no_fallback",
        }
    }

    pub fn generates_tests(&self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn executes_tests(&self) -> bool {
        matches!(self, Mode::Proptest | Mode::ProptestNoFallback)
    }

    pub fn falls_back(&self) -> bool {
        !matches!(self, Mode::ProptestNoFallback)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelIds {
    pub test_gen: String,
    pub code_gen: String,
    pub knowledge: String,
}

impl Default for ModelIds {
    fn default() -> Self {
        Self {
            test_gen: DEFAULT_MODEL.into(),
            code_gen: DEFAULT_MODEL.into(),
            knowledge: DEFAULT_MODEL.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub test_style: TestStyle,
    pub gateway_mode: GatewayMode,
    pub timeout_seconds: f64,
    pub parallelism: usize,
    pub seed: u64,
    pub models: ModelIds,
    /// Also run each generated test against the gold answer.
    pub evaluate_tests: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Proptest,
            test_style: TestStyle::AdvancedVqa,
            gateway_mode: GatewayMode::ReplayOnly,
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            parallelism: 1,
            seed: 0,
            models: ModelIds::default(),
            evaluate_tests: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("timeout_seconds must be a positive number, got {0}")]
    Timeout(f64),
    #[error("parallelism must be at least 1")]
    Parallelism,
    #[error("model id for {0} is empty")]
    EmptyModel(&'static str),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.timeout_seconds > 0.0 && self.timeout_seconds.is_finite()) {
            return Err(ConfigError::Timeout(self.timeout_seconds));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Parallelism);
        }
        for (role, id) in [
            ("test_gen", &self.models.test_gen),
            ("code_gen", &self.models.code_gen),
            ("knowledge", &self.models.knowledge),
        ] {
            if id.trim().is_empty() {
                return Err(ConfigError::EmptyModel(role));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_seconds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratedProgram {
    pub test_prompt: Option<PromptBundle>,
    pub test_completion: Option<String>,
    pub test_source: Option<String>,
    pub code_prompt: Option<PromptBundle>,
    pub code_completion: Option<String>,
    pub solution_source: Option<String>,
    pub assembled: Option<String>,
    /// Why test generation was abandoned for this task, if it was.
    pub degraded: Option<String>,
    /// Numbered `# Test case` comments in the test source.
    pub test_case_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Generated,
    Fallback,
    None,
}

impl AnswerSource {
    pub fn name(&self) -> &'static str {
        match self {
            AnswerSource::Generated => "generated",
            AnswerSource::Fallback => "fallback",
            AnswerSource::None => "none",
        }
    }
}

/// Where a non-guest failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfraStage {
    Prompt,
    Gateway,
    Fixture,
    Assembly,
    Sandbox,
    Fallback,
}

impl InfraStage {
    pub fn name(&self) -> &'static str {
        match self {
            InfraStage::Prompt => "prompt",
            InfraStage::Gateway => "gateway",
            InfraStage::Fixture => "fixture",
            InfraStage::Assembly => "assembly",
            InfraStage::Sandbox => "sandbox",
            InfraStage::Fallback => "fallback",
        }
    }
}

/// A failure of the harness rather than of the generated program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfrastructureError {
    pub stage: InfraStage,
    pub message: String,
}

impl InfrastructureError {
    pub fn new(stage: InfraStage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for InfrastructureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage.name(), self.message)
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub kind: TaskKind,
    pub dataset: DatasetProfile,
    pub query: String,
    pub mode: Mode,
    /// Style actually used for this task; absent when no tests were requested.
    pub test_style: Option<TestStyle>,
    pub program: GeneratedProgram,
    /// Absent only when the task failed for infrastructure reasons first.
    pub execution: Option<ExecutionOutcome>,
    pub infrastructure_error: Option<InfrastructureError>,
    pub final_answer: Prediction,
    pub answer_source: AnswerSource,
    pub score: f64,
    pub correct: bool,
    /// Whether the solution's value was correct, regardless of the answer path.
    pub solution_correct: Option<bool>,
    pub verdict: TestVerdict,
    pub gold_evaluation: Option<ExecutionOutcome>,
}

impl TaskOutcome {
    pub fn tally(&self) -> metrics::Tally {
        match (&self.infrastructure_error, &self.execution) {
            (Some(_), _) | (None, None) => metrics::Tally::Infrastructure,
            (None, Some(ExecutionOutcome::Ok { .. })) => metrics::Tally::Clean,
            (None, Some(ExecutionOutcome::Error(e))) => metrics::Tally::Guest(e.class),
        }
    }

    pub fn error_class(&self) -> Option<ErrorClass> {
        match self.tally() {
            metrics::Tally::Guest(c) => Some(c),
            _ => None,
        }
    }
}

/// Wall-clock timings, kept out of the run log so replays stay byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task_id: String,
    pub test_gen_ms: f64,
    pub code_gen_ms: f64,
    pub execution_ms: f64,
    pub gold_eval_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssemblyError {
    #[error("solution source is empty")]
    MissingSolution,
    #[error("test source is empty")]
    MissingTest,
}

/// Concatenates the test and the solution into one guest program.
///
/// The solution runs exactly once; `result` holds its value and
/// `solve_query` returns that memoized value to the tests.
pub fn assemble_program(test: Option<&str>, solution: &str) -> Result<String, AssemblyError> {
    if solution.trim().is_empty() {
        return Err(AssemblyError::MissingSolution);
    }
    let mut out = String::new();
    if let Some(test) = test {
        if test.trim().is_empty() {
            return Err(AssemblyError::MissingTest);
        }
        out.push_str(test.trim_end());
        out.push_str("\n\n");
    }
    out.push_str(solution.trim_end());
    out.push_str("\n\n__phase__ = \"solution\"\nresult = execute_command(image)\n");
    if test.is_some() {
        out.push_str(
            "\n\ndef solve_query(*_args, **_kwargs):\n    return result\n\n\
             __phase__ = \"test\"\nexecute_test(image)\n",
        );
    }
    Ok(out)
}

/// Most frequent annotation, earliest on ties.
fn modal_answer(answers: &[String]) -> &str {
    let mut best: Option<(&str, usize)> = None;
    for a in answers {
        let n = answers.iter().filter(|b| *b == a).count();
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((a, n));
        }
    }
    best.map_or("", |(a, _)| a)
}

/// A solution that returns the task's gold answer.
pub fn gold_solution(task: &TaskRecord) -> String {
    let body = match &task.gold {
        AnswerKey::Answers(answers) => {
            let lit = serde_json::to_string(modal_answer(answers)).expect("string serializes");
            format!("return {lit}")
        }
        AnswerKey::Box(b) => format!("return image.crop({}, {}, {}, {})", b.left, b.lower, b.right, b.upper),
    };
    format!("def {SOLUTION_FUNCTION}(image):\n    {body}\n")
}

/// The guest-style reply for a solution that could not be cut out of its
/// completion; it classifies as a syntax error.
pub fn parse_failure_reply(err: &ExtractError) -> ErrorReply {
    let (exception_name, message, traceback) = match err {
        ExtractError::NotFound(name) => (
            "ExtractionError".to_string(),
            format!("no `def {name}(` in completion"),
            String::new(),
        ),
        ExtractError::Syntax { issue, .. } => (
            issue.exception.clone(),
            issue.message.clone(),
            format!("  File \"<solution>\", line {}\n{issue}", issue.line),
        ),
    };
    ErrorReply {
        phase: ErrorPhase::Parse,
        exception_name,
        message,
        traceback,
        timed_out: false,
        result: None,
    }
}

fn count_test_cases(test: &str) -> usize {
    test.lines()
        .filter(|l| l.trim_start().to_lowercase().starts_with("# test case"))
        .count()
}

fn sentinel(kind: TaskKind) -> Prediction {
    match kind {
        TaskKind::Vqa => Prediction::Text(String::new()),
        TaskKind::Grounding => Prediction::NoBox,
    }
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run log sink failed: {0}")]
    Sink(#[source] std::io::Error),
}

/// Everything needed to run tasks of one suite under one configuration.
pub struct Pipeline {
    config: RunConfig,
    forge: PromptForge,
    gateway: Arc<Gateway>,
    supervisor: Supervisor,
    fallback: Arc<dyn FallbackAnswerer>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("gateway", &self.gateway)
            .finish()
    }
}

struct Generation {
    program: GeneratedProgram,
    /// Extraction failure of the solution, already shaped as a guest reply.
    parse_failure: Option<ErrorReply>,
    infrastructure_error: Option<InfrastructureError>,
}

impl Pipeline {
    pub fn new(
        config: RunConfig,
        profile: Option<DatasetProfile>,
        gateway: Arc<Gateway>,
        supervisor: Supervisor,
        fallback: Arc<dyn FallbackAnswerer>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            config,
            forge: PromptForge::new(profile),
            gateway,
            supervisor,
            fallback,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn fallback(&self) -> &Arc<dyn FallbackAnswerer> {
        &self.fallback
    }

    fn complete(&self, model: &str, bundle: &PromptBundle) -> Result<String, String> {
        let request = CompletionRequest::from_bundle(model, bundle, GENERATION);
        self.gateway
            .complete(&request)
            .map(|c| c.text)
            .map_err(|e| e.to_string())
    }

    fn generate(&self, task: &TaskRecord, timing: &mut TaskTiming) -> Generation {
        let mut program = GeneratedProgram::default();
        let mode = self.config.mode;

        if mode.generates_tests() {
            let start = Instant::now();
            let style = self.config.test_style.effective_for(task.kind);
            match self.forge.render_test_prompt(task, style) {
                Ok(bundle) => {
                    let reply = self.complete(&self.config.models.test_gen, &bundle);
                    program.test_prompt = Some(bundle);
                    match reply {
                        Ok(text) => {
                            match extract_function(&text, TEST_FUNCTION) {
                                Ok(f) => {
                                    program.test_case_count = Some(count_test_cases(&f.source));
                                    program.test_source = Some(f.source);
                                }
                                Err(e) => program.degraded = Some(format!("test extraction: {e}")),
                            }
                            program.test_completion = Some(text);
                        }
                        Err(e) => program.degraded = Some(format!("test generation: {e}")),
                    }
                }
                Err(e) => program.degraded = Some(format!("test prompt: {e}")),
            }
            if let Some(reason) = &program.degraded {
                tracing::warn!(task = %task.id, %reason, "falling back to baseline generation");
            }
            timing.test_gen_ms = millis(start.elapsed());
        }

        let start = Instant::now();
        let mut generation = Generation {
            program,
            parse_failure: None,
            infrastructure_error: None,
        };
        let bundle = match self
            .forge
            .render_code_prompt(task, generation.program.test_source.as_deref())
        {
            Ok(b) => b,
            Err(e) => {
                generation.infrastructure_error = Some(InfrastructureError::new(InfraStage::Prompt, e));
                return generation;
            }
        };
        let reply = self.complete(&self.config.models.code_gen, &bundle);
        generation.program.code_prompt = Some(bundle);
        timing.code_gen_ms = millis(start.elapsed());
        let text = match reply {
            Ok(t) => t,
            Err(e) => {
                generation.infrastructure_error = Some(InfrastructureError::new(InfraStage::Gateway, e));
                return generation;
            }
        };
        match extract_function(&text, SOLUTION_FUNCTION) {
            Ok(f) => generation.program.solution_source = Some(f.source),
            Err(e) => {
                generation.parse_failure = Some(parse_failure_reply(&e));
                if let ExtractError::Syntax { function, .. } = e {
                    generation.program.solution_source = Some(function);
                }
            }
        }
        generation.program.code_completion = Some(text);
        generation
    }

    fn gold_check(
        &self,
        task: &TaskRecord,
        test: &str,
        fixture: &FixtureRef,
    ) -> Option<ExecutionOutcome> {
        let program = assemble_program(Some(test), &gold_solution(task)).ok()?;
        match self
            .supervisor
            .run(&program, task.kind, &fixture.path, self.config.budget())
        {
            Ok(o) => Some(o),
            Err(e) => {
                tracing::warn!(task = %task.id, error = %e, "gold evaluation did not run");
                None
            }
        }
    }

    /// Runs one task end to end. Never fails: infrastructure problems are
    /// recorded in the outcome.
    pub fn run_task(
        &self,
        task: &TaskRecord,
        fixture: Option<&FixtureRef>,
        profile: DatasetProfile,
    ) -> (TaskOutcome, TaskTiming) {
        let started = Instant::now();
        let mode = self.config.mode;
        let mut timing = TaskTiming {
            task_id: task.id.clone(),
            ..Default::default()
        };
        let generation = self.generate(task, &mut timing);
        let program = generation.program;
        let test_style = mode
            .generates_tests()
            .then(|| self.config.test_style.effective_for(task.kind));
        let mut outcome = TaskOutcome {
            task_id: task.id.clone(),
            kind: task.kind,
            dataset: profile,
            query: task.query.clone(),
            mode,
            test_style,
            program,
            execution: None,
            infrastructure_error: generation.infrastructure_error,
            final_answer: sentinel(task.kind),
            answer_source: AnswerSource::None,
            score: 0.0,
            correct: false,
            solution_correct: None,
            verdict: TestVerdict::default(),
            gold_evaluation: None,
        };

        let fixture = match fixture {
            Some(f) => f,
            None => {
                outcome.infrastructure_error = Some(InfrastructureError::new(
                    InfraStage::Fixture,
                    format!("scene `{}` is not loaded", task.scene),
                ));
                timing.total_ms = millis(started.elapsed());
                return (outcome, timing);
            }
        };

        let tests_run = mode.executes_tests() && outcome.program.test_source.is_some();
        if outcome.infrastructure_error.is_none() {
            if let Some(reply) = generation.parse_failure {
                outcome.execution = Some(self.supervisor.outcome(GuestReply::Error(reply), task.kind));
            } else if let Some(solution) = &outcome.program.solution_source {
                let test = outcome.program.test_source.as_deref().filter(|_| tests_run);
                match assemble_program(test, solution) {
                    Ok(assembled) => {
                        let start = Instant::now();
                        let run = self.supervisor.run(
                            &assembled,
                            task.kind,
                            &fixture.path,
                            self.config.budget(),
                        );
                        timing.execution_ms = millis(start.elapsed());
                        outcome.program.assembled = Some(assembled);
                        match run {
                            Ok(o) => outcome.execution = Some(o),
                            Err(e) => outcome.infrastructure_error = Some(InfrastructureError::new(InfraStage::Sandbox, e)),
                        }
                    }
                    Err(e) => outcome.infrastructure_error = Some(InfrastructureError::new(InfraStage::Assembly, e)),
                }
            }
        }

        match (&outcome.infrastructure_error, &outcome.execution) {
            (None, Some(ExecutionOutcome::Ok { value })) => {
                outcome.final_answer = value.clone();
                outcome.answer_source = AnswerSource::Generated;
            }
            (None, Some(ExecutionOutcome::Error(_))) if mode.falls_back() => {
                match self.fallback.answer(task, &fixture.fixture) {
                    Ok(a) => {
                        outcome.final_answer = a;
                        outcome.answer_source = AnswerSource::Fallback;
                    }
                    Err(e) => outcome.infrastructure_error = Some(InfrastructureError::new(InfraStage::Fallback, e)),
                }
            }
            _ => {}
        }
        outcome.score = metrics::score(task, &outcome.final_answer);
        outcome.correct = metrics::is_correct(task, &outcome.final_answer);
        if let Some(exec) = &outcome.execution {
            outcome.solution_correct = exec.solution_value().map(|v| metrics::is_correct(task, v));
            if tests_run {
                outcome.verdict.result_passes = match exec {
                    ExecutionOutcome::Ok { .. } => Some(true),
                    ExecutionOutcome::Error(e)
                        if e.class == ErrorClass::Assertion && e.phase == ErrorPhase::Test =>
                    {
                        Some(false)
                    }
                    ExecutionOutcome::Error(_) => None,
                };
            }
        }

        if self.config.evaluate_tests {
            if let Some(test) = outcome.program.test_source.clone() {
                let start = Instant::now();
                let gold = self.gold_check(task, &test, fixture);
                timing.gold_eval_ms = millis(start.elapsed());
                outcome.verdict.gold_passes = match &gold {
                    Some(ExecutionOutcome::Ok { .. }) => Some(true),
                    Some(ExecutionOutcome::Error(e))
                        if e.class == ErrorClass::Assertion && e.phase == ErrorPhase::Test =>
                    {
                        Some(false)
                    }
                    _ => None,
                };
                outcome.gold_evaluation = gold;
            }
        }
        timing.total_ms = millis(started.elapsed());
        (outcome, timing)
    }

    /// Runs every task of `manifest` on a bounded worker pool. `sink` sees
    /// the outcomes one at a time, in suite order.
    pub fn run_suite<F>(&self, manifest: &SuiteManifest, mut sink: F) -> Result<Vec<TaskOutcome>, PipelineError>
    where
        F: FnMut(&TaskOutcome, &TaskTiming) -> std::io::Result<()>,
    {
        let tasks = &manifest.tasks;
        let workers = self.config.parallelism.min(tasks.len()).max(1);
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, TaskOutcome, TaskTiming)>();
        let mut outcomes = Vec::with_capacity(tasks.len());

        std::thread::scope(|scope| -> Result<(), PipelineError> {
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                let stop = &stop;
                scope.spawn(move || loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(task) = tasks.get(i) else { break };
                    let profile = DatasetProfile::for_kind(manifest.header.profile, task.kind);
                    let (outcome, timing) = self.run_task(task, manifest.fixture(&task.scene), profile);
                    if tx.send((i, outcome, timing)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            let mut pending = BTreeMap::new();
            for (i, outcome, timing) in rx.iter() {
                pending.insert(i, (outcome, timing));
                while let Some((outcome, timing)) = pending.remove(&outcomes.len()) {
                    if let Err(e) = sink(&outcome, &timing) {
                        stop.store(true, Ordering::Relaxed);
                        return Err(PipelineError::Sink(e));
                    }
                    outcomes.push(outcome);
                }
            }
            Ok(())
        })?;
        Ok(outcomes)
    }
}
