//! Human-readable dump of one task's stored artifacts.

use std::fmt::Write;

use propvis_core::runlog::RunManifest;
use propvis_core::{ExecutionOutcome, PromptBundle, TaskOutcome};

fn section(out: &mut String, title: &str, body: &str) {
    let _ = writeln!(out, "--- {title} ---");
    out.push_str(body.trim_end());
    out.push_str("\n\n");
}

fn prompt(out: &mut String, title: &str, bundle: &PromptBundle) {
    let _ = writeln!(out, "--- {title} ({}) ---", bundle.template_id);
    let _ = writeln!(out, "[system]\n{}", bundle.system_text.trim_end());
    let _ = writeln!(out, "[user]\n{}\n", bundle.user_text.trim_end());
}

fn flag(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "-",
    }
}

pub fn render_task(manifest: &RunManifest, o: &TaskOutcome) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task: {}", o.task_id);
    let _ = writeln!(out, "suite: {}  dataset: {}  kind: {}", manifest.suite_name, o.dataset.name(), o.kind);
    let _ = writeln!(
        out,
        "mode: {}  test style: {}",
        o.mode,
        o.test_style.map_or("-".to_string(), |s| s.to_string())
    );
    let _ = writeln!(out, "query: {}\n", o.query);

    let p = &o.program;
    if let Some(reason) = &p.degraded {
        let _ = writeln!(out, "degraded to baseline: {reason}\n");
    }
    if let Some(b) = &p.test_prompt {
        prompt(&mut out, "test prompt", b);
    }
    if let Some(c) = &p.test_completion {
        section(&mut out, "test completion", c);
    }
    if let Some(s) = &p.test_source {
        let title = match p.test_case_count {
            Some(n) => format!("test ({n} test cases)"),
            None => "test".to_string(),
        };
        section(&mut out, &title, s);
    }
    if let Some(b) = &p.code_prompt {
        prompt(&mut out, "code prompt", b);
    }
    if let Some(c) = &p.code_completion {
        section(&mut out, "code completion", c);
    }
    if let Some(s) = &p.solution_source {
        section(&mut out, "solution", s);
    }
    if let Some(a) = &p.assembled {
        section(&mut out, "assembled program", a);
    }

    let mut result = String::new();
    match &o.execution {
        Some(ExecutionOutcome::Ok { value }) => {
            let _ = writeln!(result, "status: ok\nvalue: {value}");
        }
        Some(ExecutionOutcome::Error(e)) => {
            let _ = writeln!(result, "status: error");
            let _ = writeln!(result, "class: {}", e.class);
            let _ = writeln!(result, "phase: {}", format!("{:?}", e.phase).to_lowercase());
            if e.message.is_empty() {
                let _ = writeln!(result, "exception: {}", e.exception_name);
            } else {
                let _ = writeln!(result, "exception: {}: {}", e.exception_name, e.message);
            }
            if e.timed_out {
                let _ = writeln!(result, "timed out: yes");
            }
            if let Some(v) = &e.result {
                let _ = writeln!(result, "solution value: {v}");
            }
            if !e.traceback.is_empty() {
                let _ = writeln!(result, "traceback:\n{}", e.traceback.trim_end());
            }
        }
        None => {
            let _ = writeln!(result, "status: not executed");
        }
    }
    if let Some(e) = &o.infrastructure_error {
        let _ = writeln!(result, "infrastructure error: {e}");
    }
    section(&mut out, "execution", &result);

    let mut answer = String::new();
    let _ = writeln!(answer, "final answer: {}", o.final_answer);
    let _ = writeln!(answer, "source: {}", o.answer_source.name());
    let _ = writeln!(answer, "score: {}  correct: {}", o.score, o.correct);
    if let Some(c) = o.solution_correct {
        let _ = writeln!(answer, "solution correct: {c}");
    }
    let _ = writeln!(
        answer,
        "test verdict: result {}, gold {}",
        flag(o.verdict.result_passes),
        flag(o.verdict.gold_passes)
    );
    section(&mut out, "answer", &answer);
    out
}
