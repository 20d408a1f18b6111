//! Answers a task without generated code, standing in for the fallback
//! vision-language model when a program errors.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::metrics::normalize_answer;
use crate::outcome::Prediction;
use crate::task::{SceneFixture, TaskKind, TaskRecord, DEFAULT_ANSWER};

#[derive(Debug, Error)]
#[error("fallback answerer failed: {0}")]
pub struct FallbackError(pub String);

pub trait FallbackAnswerer: Send + Sync {
    fn answer(&self, task: &TaskRecord, fixture: &SceneFixture) -> Result<Prediction, FallbackError>;

    /// Number of answers given so far.
    fn calls(&self) -> u64;
}

/// Mock fallback over scene fixtures: qa lookup for vqa, lexical overlap
/// between the query and object descriptions for grounding.
#[derive(Debug)]
pub struct FixtureFallback {
    default_answer: String,
    calls: AtomicU64,
}

impl Default for FixtureFallback {
    fn default() -> Self {
        Self::new(DEFAULT_ANSWER)
    }
}

impl FixtureFallback {
    /// `default_answer` is used when neither the qa map nor the fixture has one.
    pub fn new(default_answer: &str) -> Self {
        Self {
            default_answer: default_answer.to_string(),
            calls: AtomicU64::new(0),
        }
    }

    fn vqa(&self, query: &str, fixture: &SceneFixture) -> String {
        if let Some(a) = fixture.qa.get(query) {
            return a.clone();
        }
        let wanted = normalize_answer(query);
        fixture
            .qa
            .iter()
            .find(|(q, _)| normalize_answer(q) == wanted)
            .map(|(_, a)| a.clone())
            .or_else(|| fixture.default_answer.clone())
            .unwrap_or_else(|| self.default_answer.clone())
    }

    fn grounding(query: &str, fixture: &SceneFixture) -> Prediction {
        let words = tokens(query);
        let mut best: Option<(usize, &crate::task::SceneObject)> = None;
        for obj in &fixture.objects {
            let mut desc = tokens(&obj.name);
            for attr in &obj.attributes {
                desc.extend(tokens(attr));
            }
            let overlap = words.intersection(&desc).count();
            // Strictly greater keeps the earliest object on ties.
            if best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, obj));
            }
        }
        best.map_or(Prediction::NoBox, |(_, obj)| Prediction::Box(obj.bbox))
    }
}

fn singular(word: &str) -> String {
    if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
        word[..word.len() - 1].to_string()
    } else {
        word.to_string()
    }
}

pub(crate) fn tokens(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(singular)
        .collect()
}

impl FallbackAnswerer for FixtureFallback {
    fn answer(&self, task: &TaskRecord, fixture: &SceneFixture) -> Result<Prediction, FallbackError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(match task.kind {
            TaskKind::Vqa => Prediction::Text(self.vqa(&task.query, fixture)),
            TaskKind::Grounding => Self::grounding(&task.query, fixture),
        })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
