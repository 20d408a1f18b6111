//! Aggregates run logs into the summary file and the CSV tables: error
//! breakdown per method, ablation matrix, generated-test quality and the
//! pass/correct confusion matrices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{self, ConfusionMatrix2x2, ErrorBreakdown, TestQuality, TestVerdict};
use crate::outcome::ErrorClass;
use crate::pipeline::{AnswerSource, Mode, TaskOutcome};
use crate::runlog::RunLog;

pub const SUMMARY_FILE: &str = "summary.json";
pub const ERRORS_FILE: &str = "table1_errors.csv";
pub const ERRORS_LONG_FILE: &str = "errors_by_class.csv";
pub const ABLATION_FILE: &str = "table2_ablation.csv";
pub const TEST_QUALITY_FILE: &str = "table4_test_quality.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PLOT_FILE: &str = "scores.svg";

/// Label of the row aggregating every dataset of a run.
pub const ALL_DATASETS: &str = "all";

/// Aggregates over the tasks of one run restricted to one dataset (or all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub suite: String,
    pub dataset: String,
    pub mode: Mode,
    /// Test style used, absent for baseline.
    pub test_style: Option<String>,
    pub task_count: usize,
    /// Mean per-task score of the final answers.
    pub score: Option<f64>,
    /// Fraction of tasks whose final answer is correct.
    pub accuracy: Option<f64>,
    /// Mean score counting every non-generated answer as zero.
    pub no_fallback_score: Option<f64>,
    pub breakdown: ErrorBreakdown,
    pub generated_count: usize,
    pub fallback_count: usize,
    pub none_count: usize,
    pub degraded_count: usize,
    pub timed_out_count: usize,
    pub test_quality: TestQuality,
    pub confusion: ConfusionMatrix2x2,
}

/// One row of the mode matrix. Cells are score means; `derived` names the
/// cells computed from another mode's outcomes rather than measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    pub dataset: String,
    pub baseline_no_fallback: Option<f64>,
    pub proptest_no_fallback: Option<f64>,
    pub proptest_no_test_exec: Option<f64>,
    pub proptest: Option<f64>,
    pub derived: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub groups: Vec<GroupSummary>,
    pub ablation: Vec<AblationRow>,
}

fn summarize(suite: &str, dataset: &str, mode: Mode, style: Option<String>, outcomes: &[&TaskOutcome]) -> GroupSummary {
    let scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    let correct: Vec<f64> = outcomes.iter().map(|o| if o.correct { 1.0 } else { 0.0 }).collect();
    let generated: Vec<f64> = outcomes
        .iter()
        .map(|o| if o.answer_source == AnswerSource::Generated { o.score } else { 0.0 })
        .collect();
    let count = |src: AnswerSource| outcomes.iter().filter(|o| o.answer_source == src).count();
    let verdicts: Vec<TestVerdict> = outcomes.iter().map(|o| o.verdict).collect();
    let confusion = metrics::confusion_matrix(
        outcomes
            .iter()
            .filter_map(|o| Some((o.verdict.result_passes?, o.solution_correct?))),
    );
    GroupSummary {
        suite: suite.to_string(),
        dataset: dataset.to_string(),
        mode,
        test_style: style,
        task_count: outcomes.len(),
        score: metrics::mean(&scores),
        accuracy: metrics::mean(&correct),
        no_fallback_score: metrics::mean(&generated),
        breakdown: metrics::error_breakdown(outcomes.iter().map(|o| o.tally())),
        generated_count: count(AnswerSource::Generated),
        fallback_count: count(AnswerSource::Fallback),
        none_count: count(AnswerSource::None),
        degraded_count: outcomes.iter().filter(|o| o.program.degraded.is_some()).count(),
        timed_out_count: outcomes
            .iter()
            .filter(|o| o.execution.as_ref().and_then(|e| e.error()).is_some_and(|e| e.timed_out))
            .count(),
        test_quality: metrics::test_quality(&verdicts),
        confusion,
    }
}

fn run_groups(run: &RunLog) -> Vec<GroupSummary> {
    let cfg = &run.manifest.config;
    let suite = &run.manifest.suite_name;
    let mut datasets: Vec<_> = run.outcomes.iter().map(|o| o.dataset).collect();
    datasets.sort_by_key(|d| d.name());
    datasets.dedup();

    let mut groups = Vec::new();
    for d in datasets {
        let members: Vec<&TaskOutcome> = run.outcomes.iter().filter(|o| o.dataset == d).collect();
        let style = cfg.mode.generates_tests().then(|| {
            let kind = members[0].kind;
            cfg.test_style.effective_for(kind).name().to_string()
        });
        groups.push(summarize(suite, d.name(), cfg.mode, style, &members));
    }
    let all: Vec<&TaskOutcome> = run.outcomes.iter().collect();
    let style = cfg.mode.generates_tests().then(|| cfg.test_style.name().to_string());
    groups.push(summarize(suite, ALL_DATASETS, cfg.mode, style, &all));
    groups
}

fn ablation(groups: &[GroupSummary]) -> Vec<AblationRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for g in groups {
        let k = (g.suite.clone(), g.dataset.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(suite, dataset)| {
            let find = |mode: Mode| {
                groups
                    .iter()
                    .find(|g| g.suite == suite && g.dataset == dataset && g.mode == mode)
            };
            let mut row = AblationRow {
                suite: suite.clone(),
                dataset: dataset.clone(),
                baseline_no_fallback: find(Mode::Baseline).and_then(|g| g.no_fallback_score),
                proptest_no_fallback: find(Mode::ProptestNoFallback).and_then(|g| g.score),
                proptest_no_test_exec: find(Mode::ProptestNoTestExec).and_then(|g| g.score),
                proptest: find(Mode::Proptest).and_then(|g| g.score),
                derived: Vec::new(),
            };
            if find(Mode::ProptestNoFallback).is_none() {
                if let Some(g) = find(Mode::Proptest) {
                    row.proptest_no_fallback = g.no_fallback_score;
                    row.derived.push(Mode::ProptestNoFallback.name().to_string());
                }
            }
            row
        })
        .collect()
}

pub fn build_report(runs: &[RunLog]) -> Report {
    let groups: Vec<GroupSummary> = runs.iter().flat_map(run_groups).collect();
    let ablation = ablation(&groups);
    Report { groups, ablation }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_default()
}

fn frac_of(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

fn style_cell(g: &GroupSummary) -> String {
    g.test_style.clone().unwrap_or_else(|| "-".into())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

fn errors_table(r: &Report) -> Vec<Vec<String>> {
    r.groups
        .iter()
        .map(|g| {
            let b = &g.breakdown;
            let assertion = if g.mode.executes_tests() {
                b.assertion.to_string()
            } else {
                "-".into()
            };
            vec![
                g.suite.clone(),
                g.dataset.clone(),
                g.mode.name().into(),
                style_cell(g),
                g.task_count.to_string(),
                pct(g.score),
                b.total_errors.to_string(),
                pct(b.error_rate()),
                assertion,
                b.runtime.to_string(),
                b.syntax.to_string(),
                b.infrastructure.to_string(),
            ]
        })
        .collect()
}

fn errors_long(r: &Report) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for g in &r.groups {
        for class in ErrorClass::ALL {
            if class == ErrorClass::Assertion && !g.mode.executes_tests() {
                continue;
            }
            let n = g.breakdown.count(class);
            rows.push(vec![
                g.suite.clone(),
                g.dataset.clone(),
                g.mode.name().into(),
                style_cell(g),
                class.name().into(),
                n.to_string(),
                pct(frac_of(n, g.task_count)),
                pct(frac_of(n, g.breakdown.total_errors)),
            ]);
        }
    }
    rows
}

fn ablation_table(r: &Report) -> Vec<Vec<String>> {
    r.ablation
        .iter()
        .map(|a| {
            vec![
                a.suite.clone(),
                a.dataset.clone(),
                pct(a.baseline_no_fallback),
                pct(a.proptest_no_fallback),
                pct(a.proptest_no_test_exec),
                pct(a.proptest),
                a.derived.join(";"),
            ]
        })
        .collect()
}

fn test_quality_table(r: &Report) -> Vec<Vec<String>> {
    r.groups
        .iter()
        .filter(|g| g.mode.generates_tests())
        .map(|g| {
            let q = &g.test_quality;
            vec![
                g.suite.clone(),
                g.dataset.clone(),
                g.mode.name().into(),
                style_cell(g),
                q.evaluated.to_string(),
                q.compared.to_string(),
                pct(q.test_accuracy),
                pct(q.toxicity_rate),
            ]
        })
        .collect()
}

fn confusion_table(r: &Report) -> Vec<Vec<String>> {
    r.groups
        .iter()
        .filter(|g| g.mode.executes_tests())
        .map(|g| {
            let c = &g.confusion;
            let f = c.fractions();
            let mut row = vec![
                g.suite.clone(),
                g.dataset.clone(),
                g.mode.name().into(),
                style_cell(g),
                c.passed_correct.to_string(),
                c.passed_incorrect.to_string(),
                c.failed_correct.to_string(),
                c.failed_incorrect.to_string(),
                c.total().to_string(),
            ];
            row.extend((0..4).map(|i| pct(f.map(|f| f[i]))));
            row
        })
        .collect()
}

/// Writes the summary and every table into `dir`; returns the paths written.
pub fn write_report(report: &Report, dir: &Path, plot: bool) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    written.push(path);

    let lead = ["suite", "dataset", "mode", "test_style"];
    let with = |rest: &[&'static str]| -> Vec<&'static str> { lead.iter().copied().chain(rest.iter().copied()).collect() };
    let tables: [(&str, Vec<&str>, Vec<Vec<String>>); 5] = [
        (
            ERRORS_FILE,
            with(&["tasks", "score", "errors", "error_pct", "assertion", "runtime", "syntax", "infrastructure"]),
            errors_table(report),
        ),
        (
            ERRORS_LONG_FILE,
            with(&["class", "count", "pct_of_tasks", "pct_of_errors"]),
            errors_long(report),
        ),
        (
            ABLATION_FILE,
            vec![
                "suite",
                "dataset",
                "baseline_no_fallback",
                "proptest_no_fallback",
                "proptest_no_test_exec",
                "proptest",
                "derived",
            ],
            ablation_table(report),
        ),
        (
            TEST_QUALITY_FILE,
            with(&["evaluated", "compared", "test_accuracy", "toxicity_rate"]),
            test_quality_table(report),
        ),
        (
            CONFUSION_FILE,
            with(&[
                "passed_correct",
                "passed_incorrect",
                "failed_correct",
                "failed_incorrect",
                "total",
                "passed_correct_pct",
                "passed_incorrect_pct",
                "failed_correct_pct",
                "failed_incorrect_pct",
            ]),
            confusion_table(report),
        ),
    ];
    for (name, header, rows) in tables {
        let path = dir.join(name);
        write_csv(&path, &header, rows)?;
        written.push(path);
    }

    if plot {
        let path = dir.join(PLOT_FILE);
        std::fs::write(&path, render_svg(report))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [&str; 4] = ["#8c8c8c", "#4c72b0", "#dd8452", "#55a868"];

/// Grouped bars of the mean score: one group per dataset, one bar per mode.
pub fn render_svg(report: &Report) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    for g in &report.groups {
        if !datasets.contains(&g.dataset.as_str()) {
            datasets.push(&g.dataset);
        }
    }
    let bar_w = 18.0;
    let group_w = bar_w * Mode::ALL.len() as f64 + 24.0;
    let (left, top, plot_h) = (48.0, 24.0, 200.0);
    let width = left + group_w * datasets.len().max(1) as f64 + 180.0;
    let height = top + plot_h + 48.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    for tick in [0, 25, 50, 75, 100] {
        let y = top + plot_h * (1.0 - tick as f64 / 100.0);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{tick}</text>\n",
            left - 4.0
        ));
    }
    for (i, d) in datasets.iter().enumerate() {
        let x0 = left + 8.0 + group_w * i as f64;
        for (j, mode) in Mode::ALL.iter().enumerate() {
            let score = report
                .groups
                .iter()
                .find(|g| g.dataset == *d && g.mode == *mode)
                .and_then(|g| g.score);
            if let Some(v) = score {
                let h = plot_h * v;
                s.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w}\" height=\"{:.1}\" fill=\"{}\"><title>{} {}: {:.1}</title></rect>\n",
                    x0 + bar_w * j as f64,
                    top + plot_h - h,
                    h,
                    PALETTE[j],
                    d,
                    mode.name(),
                    v * 100.0
                ));
            }
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{d}</text>\n",
            x0 + bar_w * 2.0,
            top + plot_h + 16.0
        ));
    }
    let lx = left + group_w * datasets.len().max(1) as f64 + 16.0;
    for (j, mode) in Mode::ALL.iter().enumerate() {
        let y = top + 14.0 * j as f64;
        s.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            PALETTE[j],
            lx + 14.0,
            y + 9.0,
            mode.name()
        ));
    }
    s.push_str("</svg>\n");
    s
}
