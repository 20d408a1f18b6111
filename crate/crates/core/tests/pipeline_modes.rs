//! The 20-task scripted suite under every mode, checked against counts
//! derived by hand from the scenes and the script.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use propvis_core::metrics::{error_breakdown, Tally};
use propvis_core::pipeline::{gold_solution, AnswerSource, InfraStage, Mode, TaskOutcome};
use propvis_core::{ErrorClass, Prediction};

fn ids<'a>(outcomes: &'a [TaskOutcome], pred: impl Fn(&TaskOutcome) -> bool) -> BTreeSet<&'a str> {
    outcomes.iter().filter(|o| pred(o)).map(|o| o.task_id.as_str()).collect()
}

fn set<'a>(v: &[&'a str]) -> BTreeSet<&'a str> {
    v.iter().copied().collect()
}

fn class_ids(outcomes: &[TaskOutcome], class: ErrorClass) -> BTreeSet<&str> {
    ids(outcomes, |o| o.error_class() == Some(class))
}

fn total_score(outcomes: &[TaskOutcome]) -> f64 {
    outcomes.iter().map(|o| o.score).sum()
}

#[test]
fn proptest_mode_matches_hand_counts() {
    let run = common::run_mode(Mode::Proptest);
    let o = &run.outcomes;
    assert_eq!(o.len(), 20);
    assert_eq!(class_ids(o, ErrorClass::Assertion), set(&["t05", "t09", "t15", "g17"]));
    assert_eq!(class_ids(o, ErrorClass::Runtime), set(&["t06", "t12", "t13", "g18"]));
    assert_eq!(class_ids(o, ErrorClass::Syntax), set(&["t07"]));
    assert_eq!(run.fallback_calls, 9);
    assert_eq!(ids(o, |o| o.program.degraded.is_some()), set(&["t08"]));
    assert_eq!(total_score(o), 17.5);

    let t01 = &o[0];
    assert_eq!(t01.final_answer, Prediction::Text("microwave".into()));
    assert_eq!(t01.answer_source, AnswerSource::Generated);
    assert_eq!(t01.program.test_case_count, Some(3));
    let assembled = t01.program.assembled.as_deref().unwrap();
    assert!(assembled.contains(t01.program.test_source.as_deref().unwrap()));
    assert!(assembled.contains(t01.program.solution_source.as_deref().unwrap()));

    let t12 = o.iter().find(|o| o.task_id == "t12").unwrap();
    assert!(t12.execution.as_ref().unwrap().error().unwrap().timed_out);
}

#[test]
fn cuisine_example_runs_clean() {
    let run = common::run_mode(Mode::Proptest);
    let t02 = run.outcomes.iter().find(|o| o.task_id == "t02").unwrap();
    assert_eq!(t02.final_answer, Prediction::Text("japanese".into()));
    assert!(t02.execution.as_ref().unwrap().is_ok());
}

#[test]
fn baseline_never_reports_assertions() {
    let run = common::run_mode(Mode::Baseline);
    let o = &run.outcomes;
    assert!(class_ids(o, ErrorClass::Assertion).is_empty());
    assert_eq!(class_ids(o, ErrorClass::Runtime), set(&["t06", "t10", "t12", "t13", "g18"]));
    assert_eq!(class_ids(o, ErrorClass::Syntax), set(&["t07", "t14"]));
    assert_eq!(run.fallback_calls, 7);
    assert!(o.iter().all(|o| o.program.test_source.is_none() && o.test_style.is_none()));
    assert_eq!(total_score(o), 14.5);
}

#[test]
fn skipping_test_execution_drops_exactly_the_assertion_failures() {
    let full = common::run_mode(Mode::Proptest).outcomes;
    let run = common::run_mode(Mode::ProptestNoTestExec);
    let lite = &run.outcomes;
    let errs = |o: &[TaskOutcome]| -> BTreeSet<String> {
        o.iter().filter(|o| o.error_class().is_some()).map(|o| o.task_id.clone()).collect()
    };
    let (e_full, e_lite) = (errs(&full), errs(lite));
    assert!(e_lite.is_subset(&e_full));
    let diff: BTreeSet<&str> = e_full.difference(&e_lite).map(String::as_str).collect();
    assert_eq!(diff, class_ids(&full, ErrorClass::Assertion));
    assert_eq!(run.fallback_calls, 5);

    let t05 = lite.iter().find(|o| o.task_id == "t05").unwrap();
    assert_eq!(t05.answer_source, AnswerSource::Generated);
    assert_eq!(t05.final_answer, Prediction::Text("1".into()));
    let t05_full = full.iter().find(|o| o.task_id == "t05").unwrap();
    assert_eq!(t05_full.answer_source, AnswerSource::Fallback);
    assert_eq!(total_score(lite), 14.5);
}

#[test]
fn no_fallback_scores_errors_as_wrong() {
    let run = common::run_mode(Mode::ProptestNoFallback);
    let o = &run.outcomes;
    assert_eq!(run.fallback_calls, 0);
    for t in o {
        if t.error_class().is_some() {
            assert_eq!(t.answer_source, AnswerSource::None);
            assert_eq!(t.score, 0.0);
            assert!(!t.correct);
        } else {
            assert_eq!(t.answer_source, AnswerSource::Generated);
        }
    }
    assert_eq!(ids(o, |o| o.answer_source == AnswerSource::None).len(), 9);
    assert_eq!(total_score(o), 8.5);
    let g17 = o.iter().find(|o| o.task_id == "g17").unwrap();
    assert_eq!(g17.final_answer, Prediction::NoBox);
}

#[test]
fn every_task_takes_exactly_one_path() {
    for mode in Mode::ALL {
        for o in common::run_mode(mode).outcomes {
            let ok = o.execution.as_ref().is_some_and(|e| e.is_ok());
            let generated = o.answer_source == AnswerSource::Generated;
            assert_eq!(ok, generated, "{mode} {}", o.task_id);
            if o.answer_source == AnswerSource::Fallback {
                assert!(mode.falls_back());
            }
        }
    }
}

#[test]
fn three_scripted_errors_mean_three_fallbacks() {
    let manifest = common::suite();
    let mut script = common::script();
    for rec in &mut script {
        if !["t05", "t06", "t07"].contains(&rec.task_id.as_str()) {
            let task = manifest.task(&rec.task_id).unwrap();
            rec.test_completion = None;
            rec.code_completion = gold_solution(task);
            rec.baseline_code_completion = None;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let gateway = common::replay_gateway(&manifest, &script, dir.path());
    let run = common::run_with(&manifest, gateway, Mode::Proptest, 3);
    let b = error_breakdown(run.outcomes.iter().map(|o| o.tally()));
    assert_eq!((b.total_errors, b.assertion, b.runtime, b.syntax), (3, 1, 1, 1));
    assert_eq!(b.error_rate(), Some(0.15));
    assert_eq!(run.fallback_calls, 3);
}

#[test]
fn parallel_runs_keep_suite_order_and_content() {
    let manifest = common::suite();
    let dir = tempfile::tempdir().unwrap();
    let gateway = common::replay_gateway(&manifest, &common::script(), dir.path());
    let serial = common::run_with(&manifest, gateway.clone(), Mode::Proptest, 1).outcomes;
    let parallel = common::run_with(&manifest, gateway, Mode::Proptest, 8).outcomes;
    assert_eq!(serial, parallel);
    let order: Vec<&str> = serial.iter().map(|o| o.task_id.as_str()).collect();
    let expected: Vec<&str> = manifest.tasks.iter().map(|t| t.id.as_str()).collect();
    assert_eq!(order, expected);
}

#[test]
fn gateway_failures_are_infrastructure() {
    let manifest = common::suite();
    let mut script = common::script();
    // No code completion recorded for t01: replay misses.
    script.retain(|r| r.task_id != "t01");
    // Empty code completion for t03: a refusal.
    for rec in &mut script {
        if rec.task_id == "t03" {
            rec.code_completion = String::new();
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let gateway = common::replay_gateway(&manifest, &script, dir.path());
    let run = common::run_with(&manifest, gateway, Mode::Proptest, 2);
    let infra = ids(&run.outcomes, |o| o.tally() == Tally::Infrastructure);
    assert_eq!(infra, set(&["t01", "t03"]));
    for id in ["t01", "t03"] {
        let o = run.outcomes.iter().find(|o| o.task_id == id).unwrap();
        assert!(o.execution.is_none());
        assert_eq!(o.answer_source, AnswerSource::None);
        assert_eq!(o.infrastructure_error.as_ref().unwrap().stage, InfraStage::Gateway);
    }
    // t01 also lost its test completion, so it degraded first.
    assert!(run.outcomes[0].program.degraded.is_some());
    let b = error_breakdown(run.outcomes.iter().map(|o| o.tally()));
    assert_eq!((b.total_errors, b.infrastructure), (9, 2));
    assert_eq!(run.fallback_calls, 9);
}

#[test]
fn sandbox_failures_are_infrastructure() {
    use propvis_core::fallback::FixtureFallback;
    use propvis_core::pipeline::{Pipeline, RunConfig};
    use propvis_core::sandbox::{ClassificationTable, ProcessSandbox, Supervisor};

    let manifest = common::suite();
    let dir = tempfile::tempdir().unwrap();
    let gateway = common::replay_gateway(&manifest, &common::script(), dir.path());
    let supervisor = Supervisor::new(
        Arc::new(ProcessSandbox::new("/nonexistent/guest", vec![])),
        ClassificationTable::builtin(),
    );
    let pipeline = Pipeline::new(
        RunConfig::default(),
        None,
        gateway,
        supervisor,
        Arc::new(FixtureFallback::default()),
    )
    .unwrap();
    let task = &manifest.tasks[0];
    let (o, _) = pipeline.run_task(task, manifest.fixture(&task.scene), propvis_core::DatasetProfile::Gqa);
    assert_eq!(o.infrastructure_error.as_ref().unwrap().stage, InfraStage::Sandbox);
    assert_eq!(o.tally(), Tally::Infrastructure);
}
