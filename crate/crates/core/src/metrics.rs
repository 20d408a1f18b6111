//! Scoring and analysis: answer matching, IoU, error breakdowns, generated-test
//! quality and pass/correct confusion matrices.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::outcome::{ErrorClass, Prediction};
use crate::task::{AnswerKey, BoundingBox, TaskRecord, SOFT_ANNOTATIONS};

/// Minimum IoU for a grounding prediction to count as correct (inclusive).
pub const GROUNDING_IOU_THRESHOLD: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("soft accuracy needs exactly {SOFT_ANNOTATIONS} annotations, got {0}")]
    AnnotationCount(usize),
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// `min(1, m / 3)` where `m` counts annotations equal to the prediction
/// after normalization.
pub fn soft_accuracy(pred: &str, annotations: &[String]) -> Result<f64, MetricError> {
    if annotations.len() != SOFT_ANNOTATIONS {
        return Err(MetricError::AnnotationCount(annotations.len()));
    }
    let p = normalize_answer(pred);
    let m = annotations
        .iter()
        .filter(|a| normalize_answer(a) == p)
        .count();
    Ok((m as f64 / 3.0).min(1.0))
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn grounding_correct(pred: &BoundingBox, gold: &BoundingBox) -> bool {
    iou(pred, gold) >= GROUNDING_IOU_THRESHOLD
}

/// Per-task score: exact match, soft accuracy, or IoU depending on the gold.
pub fn score(task: &TaskRecord, pred: &Prediction) -> f64 {
    match (&task.gold, pred) {
        (AnswerKey::Answers(answers), Prediction::Text(p)) => {
            if answers.len() == SOFT_ANNOTATIONS {
                soft_accuracy(p, answers).unwrap_or(0.0)
            } else {
                answers.first().map_or(0.0, |g| exact_match(p, g))
            }
        }
        (AnswerKey::Box(gold), Prediction::Box(p)) => iou(p, gold),
        _ => 0.0,
    }
}

/// Binary correctness used for confusion matrices: full credit for vqa,
/// IoU at or above the threshold for grounding.
pub fn is_correct(task: &TaskRecord, pred: &Prediction) -> bool {
    match (&task.gold, pred) {
        (AnswerKey::Box(gold), Prediction::Box(p)) => grounding_correct(p, gold),
        (AnswerKey::Answers(_), Prediction::Text(_)) => score(task, pred) >= 1.0,
        _ => false,
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// How a task's execution ended, for error accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tally {
    Clean,
    Guest(ErrorClass),
    Infrastructure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub suite_size: usize,
    pub total_errors: usize,
    pub assertion: usize,
    pub runtime: usize,
    pub syntax: usize,
    /// Gateway and sandbox-spawn failures; not part of `total_errors`.
    pub infrastructure: usize,
}

impl ErrorBreakdown {
    pub fn from_counts(suite_size: usize, assertion: usize, runtime: usize, syntax: usize) -> Self {
        Self {
            suite_size,
            total_errors: assertion + runtime + syntax,
            assertion,
            runtime,
            syntax,
            infrastructure: 0,
        }
    }

    pub fn count(&self, class: ErrorClass) -> usize {
        match class {
            ErrorClass::Assertion => self.assertion,
            ErrorClass::Runtime => self.runtime,
            ErrorClass::Syntax => self.syntax,
        }
    }

    /// Errors as a fraction of the suite; absent for an empty suite.
    pub fn error_rate(&self) -> Option<f64> {
        (self.suite_size > 0).then(|| self.total_errors as f64 / self.suite_size as f64)
    }

    pub fn is_consistent(&self) -> bool {
        self.assertion + self.runtime + self.syntax == self.total_errors
    }
}

pub fn error_breakdown<I: IntoIterator<Item = Tally>>(outcomes: I) -> ErrorBreakdown {
    let mut b = ErrorBreakdown::default();
    for t in outcomes {
        b.suite_size += 1;
        match t {
            Tally::Clean => {}
            Tally::Infrastructure => b.infrastructure += 1,
            Tally::Guest(class) => {
                b.total_errors += 1;
                match class {
                    ErrorClass::Assertion => b.assertion += 1,
                    ErrorClass::Runtime => b.runtime += 1,
                    ErrorClass::Syntax => b.syntax += 1,
                }
            }
        }
    }
    b
}

/// Whether the produced result and the gold answer each passed the
/// generated test. `None` means the test did not run to a verdict
/// (not generated, not executed, or it raised a non-assertion error).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub result_passes: Option<bool>,
    pub gold_passes: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TestQuality {
    /// Tasks with a gold verdict.
    pub evaluated: usize,
    /// Tasks with both verdicts.
    pub compared: usize,
    pub test_accuracy: Option<f64>,
    pub toxicity_rate: Option<f64>,
}

pub fn test_quality(verdicts: &[TestVerdict]) -> TestQuality {
    let gold: Vec<bool> = verdicts.iter().filter_map(|v| v.gold_passes).collect();
    let pairs: Vec<(bool, bool)> = verdicts
        .iter()
        .filter_map(|v| Some((v.result_passes?, v.gold_passes?)))
        .collect();
    let frac = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    TestQuality {
        evaluated: gold.len(),
        compared: pairs.len(),
        test_accuracy: frac(gold.iter().filter(|&&g| g).count(), gold.len()),
        toxicity_rate: frac(pairs.iter().filter(|(r, g)| *r && !*g).count(), pairs.len()),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix2x2 {
    pub passed_correct: usize,
    pub passed_incorrect: usize,
    pub failed_correct: usize,
    pub failed_incorrect: usize,
}

impl ConfusionMatrix2x2 {
    pub fn total(&self) -> usize {
        self.passed_correct + self.passed_incorrect + self.failed_correct + self.failed_incorrect
    }

    /// Cell shares in the order passed/correct, passed/incorrect,
    /// failed/correct, failed/incorrect.
    pub fn fractions(&self) -> Option<[f64; 4]> {
        let n = self.total();
        (n > 0).then(|| {
            [
                self.passed_correct,
                self.passed_incorrect,
                self.failed_correct,
                self.failed_incorrect,
            ]
            .map(|c| c as f64 / n as f64)
        })
    }
}

/// Builds the matrix from `(passed_test, correct)` flags.
pub fn confusion_matrix<I: IntoIterator<Item = (bool, bool)>>(flags: I) -> ConfusionMatrix2x2 {
    let mut m = ConfusionMatrix2x2::default();
    for (passed, correct) in flags {
        match (passed, correct) {
            (true, true) => m.passed_correct += 1,
            (true, false) => m.passed_incorrect += 1,
            (false, true) => m.failed_correct += 1,
            (false, false) => m.failed_incorrect += 1,
        }
    }
    m
}
