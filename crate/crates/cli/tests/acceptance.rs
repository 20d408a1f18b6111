//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod core_common;
mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use propvis_cli::args::ReportArgs;
use propvis_cli::commands::{cmd_report, cmd_run, REPORT_DIR};
use propvis_core::gateway::{Cassette, Gateway};
use propvis_core::metrics::{
    error_breakdown, exact_match, grounding_correct, iou, soft_accuracy, ErrorBreakdown, Tally,
};
use propvis_core::report::{ABLATION_FILE, CONFUSION_FILE, ERRORS_FILE, ERRORS_LONG_FILE, TEST_QUALITY_FILE};
use propvis_core::runlog::{LOG_FILE, MANIFEST_FILE};
use propvis_core::{AnswerSource, BoundingBox, ErrorClass, Mode, Prediction, TaskKind, TaskOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- metrics

const METRIC_CASES: usize = 250;
const AXIS_SAMPLES: usize = 100_000;
const GRID_SIDE: usize = 200;
const IOU_TOLERANCE: f64 = 1e-3;

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(5.0..60.0);
    let h = rng.gen_range(5.0..60.0);
    let l = rng.gen_range(0.0..100.0 - w);
    let lo = rng.gen_range(0.0..100.0 - h);
    BoundingBox::new(l, lo, l + w, lo + h)
}

/// Midpoint samples of `[from, to]` lying in each interval and in both.
fn axis_counts(from: f64, to: f64, a: (f64, f64), b: (f64, f64)) -> (u64, u64, u64) {
    let step = (to - from) / AXIS_SAMPLES as f64;
    let (mut in_a, mut in_b, mut in_both) = (0, 0, 0);
    for i in 0..AXIS_SAMPLES {
        let x = from + (i as f64 + 0.5) * step;
        let ia = a.0 <= x && x <= a.1;
        let ib = b.0 <= x && x <= b.1;
        in_a += ia as u64;
        in_b += ib as u64;
        in_both += (ia && ib) as u64;
    }
    (in_a, in_b, in_both)
}

/// IoU by counting points of a uniform lattice over the pair's extent.
/// Membership in an axis-aligned box is a product of per-axis tests, so the
/// 2-D count is the product of 1-D counts over the same lattice.
fn lattice_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (xa, xb, xab) = axis_counts(
        a.left.min(b.left),
        a.right.max(b.right),
        (a.left, a.right),
        (b.left, b.right),
    );
    let (ya, yb, yab) = axis_counts(
        a.lower.min(b.lower),
        a.upper.max(b.upper),
        (a.lower, a.upper),
        (b.lower, b.upper),
    );
    let inter = xab * yab;
    let union = xa * ya + xb * yb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU by testing every point of a `GRID_SIDE`² midpoint grid on [0, 100]².
fn grid_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let step = 100.0 / GRID_SIDE as f64;
    let inside = |bx: &BoundingBox, x: f64, y: f64| bx.left <= x && x <= bx.right && bx.lower <= y && y <= bx.upper;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..GRID_SIDE {
        let x = (i as f64 + 0.5) * step;
        for j in 0..GRID_SIDE {
            let y = (j as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Lowercase, drop leading/trailing whitespace, squeeze inner runs.
fn oracle_normalize(s: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(c.to_lowercase());
        }
    }
    out
}

const WORDS: [&str; 6] = ["red", "Red", "red car", "blue", "two", "Two  "];

fn noisy_answer(rng: &mut ChaCha8Rng) -> String {
    let word = WORDS[rng.gen_range(0..WORDS.len())];
    let pad = |rng: &mut ChaCha8Rng| [" ", "", "\t", "  "][rng.gen_range(0..4)].to_string();
    let mut s = pad(rng);
    for (i, part) in word.split(' ').enumerate() {
        if i > 0 {
            s.push_str([" ", "  ", "\t "][rng.gen_range(0..3)]);
        }
        if rng.gen_bool(0.3) {
            s.push_str(&part.to_uppercase());
        } else {
            s.push_str(part);
        }
    }
    s.push_str(&pad(rng));
    s
}

fn metric_oracles() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    let mut pairs: Vec<(BoundingBox, BoundingBox)> = vec![
        (BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(0.0, 0.0, 10.0, 10.0)),
        (BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(20.0, 20.0, 30.0, 30.0)),
        (BoundingBox::new(0.0, 0.0, 40.0, 40.0), BoundingBox::new(10.0, 10.0, 20.0, 20.0)),
        (BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(10.0, 0.0, 20.0, 10.0)),
    ];
    while pairs.len() < METRIC_CASES {
        let a = random_box(&mut rng);
        let b = if rng.gen_bool(0.5) {
            // Perturb `a` so that overlapping pairs are common.
            let d = |rng: &mut ChaCha8Rng| rng.gen_range(-8.0..8.0);
            let (l, lo) = ((a.left + d(&mut rng)).max(0.0), (a.lower + d(&mut rng)).max(0.0));
            let (r, u) = ((a.right + d(&mut rng)).min(100.0), (a.upper + d(&mut rng)).min(100.0));
            if r - l < 1.0 || u - lo < 1.0 {
                continue;
            }
            BoundingBox::new(l, lo, r, u)
        } else {
            random_box(&mut rng)
        };
        pairs.push((a, b));
    }
    let mut worst = 0.0f64;
    for (a, b) in &pairs {
        let (analytic, counted) = (iou(a, b), lattice_iou(a, b));
        let delta = (analytic - counted).abs();
        worst = worst.max(delta);
        ensure(delta <= IOU_TOLERANCE, || {
            format!("iou({a:?}, {b:?}) = {analytic}, lattice count gives {counted}")
        })?;
        ensure((iou(b, a) - analytic).abs() < 1e-12, || format!("iou not symmetric for {a:?}, {b:?}"))?;
    }

    // Integer boxes against a full 2-D grid.
    let mut grid_worst = 0.0f64;
    for _ in 0..METRIC_CASES {
        let int_box = |rng: &mut ChaCha8Rng| {
            let l = rng.gen_range(0..90) as f64;
            let lo = rng.gen_range(0..90) as f64;
            let r = rng.gen_range(l as i32 + 1..=100) as f64;
            let u = rng.gen_range(lo as i32 + 1..=100) as f64;
            BoundingBox::new(l, lo, r, u)
        };
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        let delta = (iou(&a, &b) - grid_iou(&a, &b)).abs();
        grid_worst = grid_worst.max(delta);
        ensure(delta <= IOU_TOLERANCE, || format!("grid iou mismatch for {a:?}, {b:?}: {delta}"))?;
    }

    // The threshold is inclusive.
    let gold = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
    ensure(grounding_correct(&BoundingBox::new(0.0, 0.0, 10.0, 7.0), &gold), || {
        "IoU of exactly 0.7 must count as correct".into()
    })?;
    ensure(!grounding_correct(&BoundingBox::new(0.0, 0.0, 10.0, 6.99), &gold), || {
        "IoU below 0.7 must not count".into()
    })?;

    for _ in 0..METRIC_CASES {
        let (p, g) = (noisy_answer(&mut rng), noisy_answer(&mut rng));
        let expected = if oracle_normalize(&p) == oracle_normalize(&g) { 1.0 } else { 0.0 };
        ensure(exact_match(&p, &g) == expected, || format!("exact_match({p:?}, {g:?})"))?;
    }
    let mut seen_m = BTreeSet::new();
    for _ in 0..METRIC_CASES {
        let pred = noisy_answer(&mut rng);
        let anns: Vec<String> = (0..10).map(|_| noisy_answer(&mut rng)).collect();
        let m = anns.iter().filter(|a| oracle_normalize(a) == oracle_normalize(&pred)).count();
        seen_m.insert(m);
        let expected = f64::min(1.0, m as f64 / 3.0);
        let got = soft_accuracy(&pred, &anns).map_err(|e| e.to_string())?;
        ensure(got == expected, || format!("soft_accuracy({pred:?}, {anns:?}) = {got}, want {expected}"))?;
    }
    ensure(seen_m.len() >= 4, || format!("annotation matches too uniform: {seen_m:?}"))?;
    ensure(soft_accuracy("red", &vec!["red".to_string(); 9]).is_err(), || {
        "nine annotations must be rejected".into()
    })?;

    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{n} IoU pairs vs {AXIS_SAMPLES}² lattice (max |Δ| {worst:.1e}), {n} vs {GRID_SIDE}² grid (max |Δ| {grid_worst:.1e}), \
         {n} exact_match and {n} soft_accuracy cases exact, {:.2}s",
        elapsed.as_secs_f64(),
        n = METRIC_CASES,
    ))
}

// ---------------------------------------------------------- classifier

/// Published rows (total, assertion, runtime, syntax) from the error tables.
const PUBLISHED_ROWS: [(usize, usize, usize, usize); 10] = [
    (411, 0, 322, 89),
    (1264, 1001, 227, 36),
    (11, 0, 9, 2),
    (174, 169, 3, 2),
    (281, 0, 240, 41),
    (871, 617, 241, 13),
    (435, 0, 386, 49),
    (1132, 875, 250, 7),
    (732, 469, 232, 31),
    (1264, 1001, 227, 36),
];

fn classifier_corpus() -> Check {
    let corpus = core_common::corpus::load_corpus();
    ensure(corpus.len() == 30, || format!("corpus has {} cases", corpus.len()))?;
    let mut tallies = Vec::new();
    for class in ErrorClass::ALL {
        let n = corpus.iter().filter(|c| c.expected == class).count();
        ensure(n == 10, || format!("{n} cases labelled {class}"))?;
    }
    for case in &corpus {
        let got = core_common::corpus::classify_case(case);
        ensure(got == Some(case.expected), || {
            format!("{} ({}): expected {}, got {got:?}", case.id, case.note, case.expected)
        })?;
        tallies.push(got.map_or(Tally::Clean, Tally::Guest));
    }
    let b = error_breakdown(tallies);
    ensure(b.is_consistent() && b.total_errors == 30, || format!("corpus breakdown {b:?}"))?;
    for (total, a, r, s) in PUBLISHED_ROWS {
        let row = ErrorBreakdown::from_counts(total, a, r, s);
        ensure(row.is_consistent() && row.total_errors == total, || {
            format!("published row {a}+{r}+{s} != {total}")
        })?;
    }
    Ok(format!(
        "30/30 corpus cases classified (10 per class), class sums hold, {} published rows consistent",
        PUBLISHED_ROWS.len()
    ))
}

// --------------------------------------------------------- mode matrix

fn committed_gateway() -> Arc<Gateway> {
    let path = common::scripted20().join("cassette.jsonl");
    Arc::new(Gateway::replay(Arc::new(Cassette::open_read_only(&path).unwrap())))
}

fn ids(outcomes: &[TaskOutcome], keep: impl Fn(&TaskOutcome) -> bool) -> BTreeSet<String> {
    outcomes.iter().filter(|o| keep(o)).map(|o| o.task_id.clone()).collect()
}

fn counts(outcomes: &[TaskOutcome]) -> (usize, usize, usize) {
    let b = error_breakdown(outcomes.iter().map(|o| o.tally()));
    (b.assertion, b.runtime, b.syntax)
}

fn mode_matrix() -> Check {
    let manifest = core_common::suite();
    ensure(manifest.len() == 20, || format!("suite has {} tasks", manifest.len()))?;
    let run = |mode| core_common::run_with(&manifest, committed_gateway(), mode, 4);
    let baseline = run(Mode::Baseline);
    let proptest = run(Mode::Proptest);
    let no_exec = run(Mode::ProptestNoTestExec);
    let no_fallback = run(Mode::ProptestNoFallback);

    // (a)
    ensure(counts(&baseline.outcomes) == (0, 5, 2), || {
        format!("baseline counts {:?}", counts(&baseline.outcomes))
    })?;
    ensure(counts(&proptest.outcomes) == (4, 4, 1), || {
        format!("proptest counts {:?}", counts(&proptest.outcomes))
    })?;

    // (b)
    let assertion_tasks = ids(&proptest.outcomes, |o| o.error_class() == Some(ErrorClass::Assertion));
    let differing: BTreeSet<String> = proptest
        .outcomes
        .iter()
        .zip(&no_exec.outcomes)
        .filter(|(p, n)| {
            (p.error_class(), &p.final_answer, p.answer_source, p.score)
                != (n.error_class(), &n.final_answer, n.answer_source, n.score)
        })
        .map(|(p, _)| p.task_id.clone())
        .collect();
    ensure(!assertion_tasks.is_empty() && differing == assertion_tasks, || {
        format!("differing {differing:?} vs assertion tasks {assertion_tasks:?}")
    })?;
    ensure(
        no_exec.outcomes.iter().all(|o| o.error_class() != Some(ErrorClass::Assertion)),
        || "proptest_no_test_exec reported an assertion".into(),
    )?;

    // (c)
    for (mode, r) in [("baseline", &baseline), ("proptest", &proptest), ("proptest_no_test_exec", &no_exec)] {
        let errors = error_breakdown(r.outcomes.iter().map(|o| o.tally())).total_errors as u64;
        let fallbacks = r.outcomes.iter().filter(|o| o.answer_source == AnswerSource::Fallback).count() as u64;
        ensure(r.fallback_calls == errors && fallbacks == errors, || {
            format!("{mode}: {} fallback calls, {fallbacks} fallback answers, {errors} errors", r.fallback_calls)
        })?;
    }
    ensure(no_fallback.fallback_calls == 0, || "no_fallback invoked the fallback".into())?;

    // (d)
    let mut errored = 0;
    for o in &no_fallback.outcomes {
        if o.error_class().is_some() {
            errored += 1;
            let sentinel = match o.kind {
                TaskKind::Vqa => Prediction::Text(String::new()),
                TaskKind::Grounding => Prediction::NoBox,
            };
            ensure(
                o.score == 0.0 && !o.correct && o.answer_source == AnswerSource::None && o.final_answer == sentinel,
                || format!("{} errored but scored {} via {}", o.task_id, o.score, o.answer_source.name()),
            )?;
        }
    }
    ensure(errored == 9, || format!("{errored} errored tasks without fallback"))?;
    Ok(format!(
        "baseline 0 assertion errors; proptest vs no_test_exec differ on exactly {:?}; fallback calls = errors (7, 9, 5); \
         {errored} no-fallback errors scored 0; in-process protocol double",
        assertion_tasks
    ))
}

// ------------------------------------------------------------- replay

fn run_dir(mode: Mode, out: &Path) {
    let args = propvis_cli::args::RunArgs {
        plot: true,
        ..common::scripted_args(mode, out)
    };
    cmd_run(&args).unwrap_or_else(|e| panic!("{mode} run failed: {e}"));
}

fn deterministic_replay() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for mode in Mode::ALL {
        let (a, b) = (dir.path().join(format!("{mode}-a")), dir.path().join(format!("{mode}-b")));
        run_dir(mode, &a);
        run_dir(mode, &b);
        for name in [MANIFEST_FILE, LOG_FILE] {
            ensure(std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap(), || {
                format!("{mode}: {name} differs between runs")
            })?;
            compared += 1;
        }
        let (ra, rb) = (common::snapshot(&a.join(REPORT_DIR)), common::snapshot(&b.join(REPORT_DIR)));
        ensure(ra.len() == 7 && ra == rb, || format!("{mode}: report files differ"))?;
        compared += ra.len();
    }
    Ok(format!("two replay_only runs per mode, {compared} files byte-identical (timings excluded)"))
}

// -------------------------------------------------------------- report

fn report_shapes() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = Mode::ALL.iter().map(|m| dir.path().join(m.name())).collect();
    for (mode, out) in Mode::ALL.iter().zip(&runs) {
        run_dir(*mode, out);
    }
    let combined = dir.path().join("combined");
    cmd_report(&ReportArgs {
        runs: runs.clone(),
        out: Some(combined.clone()),
        plot: true,
    })
    .map_err(|e| e.to_string())?;
    let expected = common::scripted20().join("expected");
    let mut rows = 0;
    for name in [ERRORS_FILE, ABLATION_FILE, TEST_QUALITY_FILE, CONFUSION_FILE] {
        let got = common::read(&combined.join(name));
        let want = common::read(&expected.join(name));
        ensure(got == want, || format!("{name}:\n{got}\nexpected:\n{want}"))?;
        rows += got.lines().count() - 1;
    }
    let long = common::read(&runs[0].join(REPORT_DIR).join(ERRORS_LONG_FILE));
    ensure(long == common::read(&expected.join("errors_by_class_baseline.csv")), || {
        format!("baseline {ERRORS_LONG_FILE}:\n{long}")
    })?;
    Ok(format!(
        "error table, mode matrix, test quality and confusion CSVs match hand-derived counts ({rows} rows)"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 5] = [
        ("metric oracles", metric_oracles),
        ("error-classifier corpus", classifier_corpus),
        ("mode matrix", mode_matrix),
        ("deterministic replay", deterministic_replay),
        ("report shapes", report_shapes),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS [{}/{}] {name}: {detail}", i + 1, criteria.len()),
            Err(reason) => {
                failed += 1;
                println!("FAIL [{}/{}] {name}: {reason}", i + 1, criteria.len());
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", criteria.len());
}
