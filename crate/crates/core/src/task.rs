//! Task records, scene fixtures and evaluation suites.
//!
//! A suite is a line-delimited file: the first record is a [`SuiteHeader`],
//! every following non-blank line is one [`TaskRecord`]. Scene fixtures live
//! one per file in the header's `fixtures_dir` (relative to the suite file),
//! named `<scene>.json`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::normalize_answer;

/// Number of annotations carried by a soft-accuracy task.
pub const SOFT_ANNOTATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("task `{id}`: {reason}")]
    InvalidTask { id: String, reason: String },
    #[error("fixture `{scene}`: {reason}")]
    InvalidFixture { scene: String, reason: String },
    #[error("task `{id}` references unknown scene `{scene}`")]
    DanglingScene { id: String, scene: String },
    #[error("duplicate task id `{0}`")]
    DuplicateId(String),
    #[error("suite file {0} has no header record")]
    MissingHeader(PathBuf),
    #[error("cannot sample {requested} tasks from a suite of {available}")]
    SampleTooLarge { requested: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vqa,
    Grounding,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Vqa => "vqa",
            TaskKind::Grounding => "grounding",
        })
    }
}

/// Axis-aligned box as `[left, lower, right, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub left: f64,
    pub lower: f64,
    pub right: f64,
    pub upper: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from([left, lower, right, upper]: [f64; 4]) -> Self {
        Self {
            left,
            lower,
            right,
            upper,
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.left, b.lower, b.right, b.upper]
    }
}

impl BoundingBox {
    pub fn new(left: f64, lower: f64, right: f64, upper: f64) -> Self {
        Self {
            left,
            lower,
            right,
            upper,
        }
    }

    /// Checks finiteness and strict ordering of both axes.
    pub fn validate(&self) -> Result<(), String> {
        let coords = [self.left, self.lower, self.right, self.upper];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(format!("box {coords:?} has a non-finite coordinate"));
        }
        if self.left >= self.right {
            return Err(format!(
                "box left={} must be below right={}",
                self.left, self.right
            ));
        }
        if self.lower >= self.upper {
            return Err(format!(
                "box lower={} must be below upper={}",
                self.lower, self.upper
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.right - self.left).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.upper - self.lower).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.left + self.right) / 2.0,
            (self.lower + self.upper) / 2.0,
        )
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.upper.min(other.upper) - self.lower.max(other.lower);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    /// True when `self` lies inside `outer` (edges may touch).
    pub fn is_within(&self, outer: &BoundingBox) -> bool {
        self.left >= outer.left
            && self.lower >= outer.lower
            && self.right <= outer.right
            && self.upper <= outer.upper
    }
}

/// Ground truth of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKey {
    Answers(Vec<String>),
    #[serde(rename = "box")]
    Box(BoundingBox),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub kind: TaskKind,
    pub query: String,
    pub scene: String,
    pub gold: AnswerKey,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<(), SuiteError> {
        let invalid = |reason: String| SuiteError::InvalidTask {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.query.trim().is_empty() {
            return Err(invalid("empty query".into()));
        }
        match (&self.kind, &self.gold) {
            (TaskKind::Vqa, AnswerKey::Answers(answers)) => {
                if answers.len() != 1 && answers.len() != SOFT_ANNOTATIONS {
                    return Err(invalid(format!(
                        "vqa gold must hold 1 answer or {SOFT_ANNOTATIONS} annotations, got {}",
                        answers.len()
                    )));
                }
                if let Some(pos) = answers.iter().position(|a| normalize_answer(a).is_empty()) {
                    return Err(invalid(format!("gold answer #{pos} is empty")));
                }
                Ok(())
            }
            (TaskKind::Grounding, AnswerKey::Box(b)) => b.validate().map_err(invalid),
            (TaskKind::Vqa, AnswerKey::Box(_)) => Err(invalid("vqa task carries a box".into())),
            (TaskKind::Grounding, AnswerKey::Answers(_)) => {
                Err(invalid("grounding task carries answer strings".into()))
            }
        }
    }

    /// Soft-accuracy tasks are the ones carrying a full annotation set.
    pub fn is_soft(&self) -> bool {
        matches!(&self.gold, AnswerKey::Answers(a) if a.len() == SOFT_ANNOTATIONS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
}

/// Declarative stand-in for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFixture {
    pub id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default, deserialize_with = "unique_map")]
    pub qa: BTreeMap<String, String>,
    #[serde(default, deserialize_with = "unique_map")]
    pub knowledge: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty", deserialize_with = "unique_map")]
    pub depth: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_answer: Option<String>,
}

impl SceneFixture {
    pub fn bounds(&self) -> BoundingBox {
        BoundingBox::new(0.0, 0.0, self.width, self.height)
    }

    pub fn validate(&self, scene: &str) -> Result<(), SuiteError> {
        let invalid = |reason: String| SuiteError::InvalidFixture {
            scene: scene.to_string(),
            reason,
        };
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite())
        {
            return Err(invalid(format!(
                "bad dimensions {}x{}",
                self.width, self.height
            )));
        }
        let frame = self.bounds();
        for obj in &self.objects {
            obj.bbox
                .validate()
                .map_err(|r| invalid(format!("object `{}`: {r}", obj.name)))?;
            if !obj.bbox.is_within(&frame) {
                return Err(invalid(format!(
                    "object `{}` box {:?} leaves the {}x{} frame",
                    obj.name,
                    <[f64; 4]>::from(obj.bbox),
                    self.width,
                    self.height
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SuiteError> {
        let text = fs::read_to_string(path).map_err(|source| SuiteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SuiteError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// JSON object → map, rejecting repeated keys instead of keeping the last one.
fn unique_map<'de, D, V>(deserializer: D) -> Result<BTreeMap<String, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    struct UniqueMap<V>(std::marker::PhantomData<V>);

    impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueMap<V> {
        type Value = BTreeMap<String, V>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a map with unique keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = access.next_entry::<String, V>()? {
                if out.contains_key(&k) {
                    return Err(de::Error::custom(format!("duplicate key `{k}`")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(UniqueMap(std::marker::PhantomData))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateConvention {
    BottomLeft,
    TopLeft,
}

/// Which published benchmark a suite imitates; selects prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetProfile {
    Gqa,
    Aokvqa,
    Refcoco,
    RefcocoPlus,
}

impl DatasetProfile {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetProfile::Gqa => "gqa",
            DatasetProfile::Aokvqa => "aokvqa",
            DatasetProfile::Refcoco => "refcoco",
            DatasetProfile::RefcocoPlus => "refcoco_plus",
        }
    }

    /// Profile used for a task of `kind` in a suite declaring `self`.
    pub fn for_kind(suite: Option<DatasetProfile>, kind: TaskKind) -> DatasetProfile {
        match (kind, suite) {
            (TaskKind::Vqa, Some(DatasetProfile::Aokvqa)) => DatasetProfile::Aokvqa,
            (TaskKind::Vqa, _) => DatasetProfile::Gqa,
            (TaskKind::Grounding, Some(DatasetProfile::RefcocoPlus)) => DatasetProfile::RefcocoPlus,
            (TaskKind::Grounding, _) => DatasetProfile::Refcoco,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteHeader {
    pub name: String,
    pub coordinate_convention: CoordinateConvention,
    pub fixtures_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DatasetProfile>,
    /// Answer used when a fixture has no entry for a simple query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_answer: Option<String>,
}

pub const DEFAULT_ANSWER: &str = "yes";

impl SuiteHeader {
    pub fn default_answer(&self) -> &str {
        self.default_answer.as_deref().unwrap_or(DEFAULT_ANSWER)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRef {
    pub path: PathBuf,
    pub fixture: Arc<SceneFixture>,
}

/// A validated suite. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteManifest {
    pub header: SuiteHeader,
    pub tasks: Vec<TaskRecord>,
    pub fixtures: BTreeMap<String, FixtureRef>,
}

impl SuiteManifest {
    pub fn fixture(&self, scene: &str) -> Option<&FixtureRef> {
        self.fixtures.get(scene)
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Validates every record and cross-reference.
    pub fn validate(&self) -> Result<(), SuiteError> {
        let mut seen = HashSet::new();
        for task in &self.tasks {
            task.validate()?;
            if !seen.insert(task.id.as_str()) {
                return Err(SuiteError::DuplicateId(task.id.clone()));
            }
            if !self.fixtures.contains_key(&task.scene) {
                return Err(SuiteError::DanglingScene {
                    id: task.id.clone(),
                    scene: task.scene.clone(),
                });
            }
        }
        for (scene, fixture) in &self.fixtures {
            fixture.fixture.validate(scene)?;
        }
        Ok(())
    }
}

fn parse_line<T: for<'de> Deserialize<'de>>(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<T, SuiteError> {
    serde_json::from_str(line).map_err(|e| SuiteError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: format!("column {}: {e}", e.column()),
    })
}

/// Loads and validates a suite file together with its fixtures.
pub fn load_suite(path: &Path) -> Result<SuiteManifest, SuiteError> {
    let text = fs::read_to_string(path).map_err(|source| SuiteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, hdr) = lines
        .next()
        .ok_or_else(|| SuiteError::MissingHeader(path.to_path_buf()))?;
    let header: SuiteHeader = parse_line(path, hline, hdr)?;

    let mut tasks = Vec::new();
    for (line_no, line) in lines {
        tasks.push(parse_line::<TaskRecord>(path, line_no, line)?);
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let fixtures_dir = base.join(&header.fixtures_dir);
    let mut fixtures = BTreeMap::new();
    for task in &tasks {
        task.validate()?;
        if fixtures.contains_key(&task.scene) {
            continue;
        }
        let fpath = fixtures_dir.join(format!("{}.json", task.scene));
        if !fpath.is_file() {
            return Err(SuiteError::DanglingScene {
                id: task.id.clone(),
                scene: task.scene.clone(),
            });
        }
        let fixture = SceneFixture::load(&fpath)?;
        fixtures.insert(
            task.scene.clone(),
            FixtureRef {
                path: fpath,
                fixture: Arc::new(fixture),
            },
        );
    }

    let manifest = SuiteManifest {
        header,
        tasks,
        fixtures,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes `manifest` as a suite file at `path`, fixtures under the header's
/// `fixtures_dir`. Fixture paths in the returned manifest point at the new files.
pub fn save_suite(manifest: &SuiteManifest, path: &Path) -> Result<SuiteManifest, SuiteError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| SuiteError::Io { path: p, source }
    };
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let fixtures_dir = base.join(&manifest.header.fixtures_dir);
    fs::create_dir_all(&fixtures_dir).map_err(io_err(&fixtures_dir))?;

    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &manifest.header).expect("header serializes");
    out.push(b'\n');
    for task in &manifest.tasks {
        serde_json::to_writer(&mut out, task).expect("task serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&out).map_err(io_err(path))?;

    let mut fixtures = BTreeMap::new();
    for (scene, fref) in &manifest.fixtures {
        let fpath = fixtures_dir.join(format!("{scene}.json"));
        let body = serde_json::to_string_pretty(fref.fixture.as_ref()).expect("fixture serializes");
        fs::write(&fpath, body).map_err(io_err(&fpath))?;
        fixtures.insert(
            scene.clone(),
            FixtureRef {
                path: fpath,
                fixture: fref.fixture.clone(),
            },
        );
    }
    Ok(SuiteManifest {
        header: manifest.header.clone(),
        tasks: manifest.tasks.clone(),
        fixtures,
    })
}

/// Deterministic `n`-task subset. Tasks keep their suite order.
pub fn sample_subset(
    manifest: &SuiteManifest,
    n: usize,
    seed: u64,
) -> Result<SuiteManifest, SuiteError> {
    let available = manifest.tasks.len();
    if n > available {
        return Err(SuiteError::SampleTooLarge {
            requested: n,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    let tasks: Vec<TaskRecord> = picked.iter().map(|&i| manifest.tasks[i].clone()).collect();
    let fixtures = manifest
        .fixtures
        .iter()
        .filter(|(scene, _)| tasks.iter().any(|t| &t.scene == *scene))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(SuiteManifest {
        header: manifest.header.clone(),
        tasks,
        fixtures,
    })
}
