//! Prompt rendering for property-test generation and test-conditioned code
//! generation.
//!
//! Templates are stored verbatim under `assets/templates`, in-context
//! examples and tool descriptions under `assets/examples`. Rendering is a
//! pure string transformation: drop the guideline lines a variant does not
//! use, then fill every slot in one left-to-right pass so that text coming
//! from a query or a test never gets re-scanned for markers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{DatasetProfile, TaskKind, TaskRecord};

pub const TEMPLATE_VERSION: &str = "v1";

pub const TEST_SYSTEM_PROMPT: &str =
    "You are an expert programming assistant. Only answer with a function starting with def execute_test.";
pub const CODE_SYSTEM_PROMPT: &str = "Only answer with a function starting def execute_command.";

pub const QUERY_SLOT: &str = "INSERT_QUERY_HERE";
pub const TESTS_SLOT: &str = "INSERT_ASSERTION_TESTS_HERE";

mod assets {
    pub const TEST_GQA: &str = include_str!("../assets/templates/test_gqa.txt");
    pub const TEST_GENERIC: &str = include_str!("../assets/templates/test_generic.txt");
    pub const CODE_VQA: &str = include_str!("../assets/templates/code_vqa.txt");
    pub const CODE_GROUNDING: &str = include_str!("../assets/templates/code_grounding.txt");
    pub const CODE_GROUNDING_PLUS: &str = include_str!("../assets/templates/code_grounding_plus.txt");

    pub const EX_TEST_GQA_ADVANCED: &str = include_str!("../assets/examples/test_gqa_advanced.txt");
    pub const EX_TEST_GQA_BASIC: &str = include_str!("../assets/examples/test_gqa_basic.txt");
    pub const EX_TEST_AOKVQA_ADVANCED: &str =
        include_str!("../assets/examples/test_aokvqa_advanced.txt");
    pub const EX_TEST_AOKVQA_BASIC: &str = include_str!("../assets/examples/test_aokvqa_basic.txt");
    pub const EX_TEST_GROUNDING: &str = include_str!("../assets/examples/test_grounding.txt");
    pub const EX_CODE_VQA: &str = include_str!("../assets/examples/code_vqa.txt");
    pub const EX_CODE_REFCOCO: &str = include_str!("../assets/examples/code_grounding_refcoco.txt");
    pub const EX_CODE_REFCOCO_PLUS: &str =
        include_str!("../assets/examples/code_grounding_refcoco_plus.txt");
    pub const API_VQA: &str = include_str!("../assets/examples/api_vqa.txt");
    pub const API_GROUNDING: &str = include_str!("../assets/examples/api_grounding.txt");
}

// In-context example and API description markers, as they appear in the templates.
const ICE_TEST_GQA: &str = "{{{{{{ TEN IN-CONTEXT EXAMPLES GOES HERE  }}}}}}";
const ICE_TEST_GENERIC: &str = "<<<<< TEN IN-CONTEXT EXAMPLES >>>>>";
const ICE_CODE_VQA: &str = "<<<<< 8 IN-CONTEXT EXAMPLES >>>>>";
const ICE_CODE_GROUNDING: &str = "{{{{{ 11 IN-CONTEXT EXAMPLES }}}}}";
const API_CODE_VQA: &str = "<<<<< API DESCRIPTIONS >>>>>";
const API_CODE_GROUNDING: &str = "{{{{{ API DESCRIPTIONS }}}}}";

/// Every marker a rendered prompt must no longer contain.
pub const MARKERS: &[&str] = &[
    QUERY_SLOT,
    TESTS_SLOT,
    ICE_TEST_GQA,
    ICE_TEST_GENERIC,
    ICE_CODE_VQA,
    ICE_CODE_GROUNDING,
    API_CODE_VQA,
    API_CODE_GROUNDING,
];

const GQA_LLM_GUIDELINE: &str =
    "4. Use the llm_query function to answer informational questions not concerning the image.";
const GENERIC_WORDS_GUIDELINE: &str =
    "- Return value of the solve_query function is a string with one or two words.";
const GENERIC_LLM_GUIDELINE: &str =
    "- Use the llm_query function to answer informational questions not concerning the image.";
const VQA_TESTS_GUIDELINE: &str =
    "- Assertion tests (below) is used to verify the expected output. Consider these when writing the function.";
const VQA_FALLBACK_GUIDELINE: &str = "- Do not return None or \"Unknown\". If the answer is not found, return image_patch.simple_query(\"INSERT_QUERY_HERE\") to ask a question about the image.";
const VQA_TESTS_BLOCK: &[&str] = &["Assertion tests:", TESTS_SLOT];
const GROUNDING_TESTS_GUIDELINE: &str = "- Consider the properties of the expected returned `ImagePatch` object from the << ASSERTION_TESTS >> to write the function.";
const GROUNDING_TESTS_BLOCK: &[&str] = &["<< ASSERTION_TESTS >>:", TESTS_SLOT];
const GROUNDING_TEST_SEGMENTS: &[&str] = &[
    " Use the provided << ASSERTION_TESTS >> to understand the expected properties of the `ImagePatch` object that the function should return.",
    " and << ASSERTION_TESTS >>",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStyle {
    BasicVqa,
    AdvancedVqa,
    Grounding,
}

impl TestStyle {
    pub fn name(&self) -> &'static str {
        match self {
            TestStyle::BasicVqa => "basic_vqa",
            TestStyle::AdvancedVqa => "advanced_vqa",
            TestStyle::Grounding => "grounding",
        }
    }

    pub fn compatible_with(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (TestStyle::Grounding, TaskKind::Grounding)
                | (TestStyle::BasicVqa | TestStyle::AdvancedVqa, TaskKind::Vqa)
        )
    }

    /// Style actually used for a task when a run prefers `self`: grounding
    /// tasks always get grounding tests, vqa tasks fall back to advanced.
    pub fn effective_for(&self, kind: TaskKind) -> TestStyle {
        match kind {
            TaskKind::Grounding => TestStyle::Grounding,
            TaskKind::Vqa if self.compatible_with(kind) => *self,
            TaskKind::Vqa => TestStyle::AdvancedVqa,
        }
    }
}

impl fmt::Display for TestStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TestStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic_vqa" => Ok(TestStyle::BasicVqa),
            "advanced_vqa" => Ok(TestStyle::AdvancedVqa),
            "grounding" => Ok(TestStyle::Grounding),
            other => Err(format!("unknown test style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Test(TestStyle),
    Code,
    CodeBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub variant: PromptVariant,
    pub template_id: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("test style {style} cannot be used for a {kind} task")]
    IncompatibleStyle { style: TestStyle, kind: TaskKind },
    #[error("task `{0}` has an empty query")]
    EmptyQuery(String),
    #[error("assertion tests for task `{0}` are empty")]
    EmptyTests(String),
}

fn drop_lines(text: &str, lines: &[&str]) -> String {
    text.lines()
        .filter(|l| !lines.contains(&l.trim_end()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn drop_segments(mut text: String, segments: &[&str]) -> String {
    for seg in segments {
        text = text.replace(seg, "");
    }
    text
}

/// Replaces every slot occurrence in a single left-to-right pass.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    loop {
        let next = slots
            .iter()
            .filter_map(|(marker, value)| rest.find(marker).map(|pos| (pos, *marker, *value)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            None => {
                out.push_str(rest);
                return out;
            }
            Some((pos, marker, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + marker.len()..];
            }
        }
    }
}

fn trim_block(s: &str) -> &str {
    s.trim_matches('\n')
}

/// Renders prompts for one suite profile. Stateless apart from the profile.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptForge {
    profile: Option<DatasetProfile>,
}

impl PromptForge {
    pub fn new(profile: Option<DatasetProfile>) -> Self {
        Self { profile }
    }

    pub fn profile_for(&self, kind: TaskKind) -> DatasetProfile {
        DatasetProfile::for_kind(self.profile, kind)
    }

    pub fn render_test_prompt(
        &self,
        task: &TaskRecord,
        style: TestStyle,
    ) -> Result<PromptBundle, PromptError> {
        if task.query.trim().is_empty() {
            return Err(PromptError::EmptyQuery(task.id.clone()));
        }
        if !style.compatible_with(task.kind) {
            return Err(PromptError::IncompatibleStyle {
                style,
                kind: task.kind,
            });
        }
        let profile = self.profile_for(task.kind);
        let (name, template, marker, examples, dropped): (_, _, _, _, &[&str]) =
            match (profile, style) {
                (DatasetProfile::Gqa, TestStyle::AdvancedVqa) => (
                    "test_gqa",
                    assets::TEST_GQA,
                    ICE_TEST_GQA,
                    assets::EX_TEST_GQA_ADVANCED,
                    &[],
                ),
                (DatasetProfile::Gqa, _) => (
                    "test_gqa",
                    assets::TEST_GQA,
                    ICE_TEST_GQA,
                    assets::EX_TEST_GQA_BASIC,
                    &[GQA_LLM_GUIDELINE],
                ),
                (DatasetProfile::Aokvqa, TestStyle::AdvancedVqa) => (
                    "test_generic",
                    assets::TEST_GENERIC,
                    ICE_TEST_GENERIC,
                    assets::EX_TEST_AOKVQA_ADVANCED,
                    &[],
                ),
                (DatasetProfile::Aokvqa, _) => (
                    "test_generic",
                    assets::TEST_GENERIC,
                    ICE_TEST_GENERIC,
                    assets::EX_TEST_AOKVQA_BASIC,
                    &[GENERIC_LLM_GUIDELINE],
                ),
                (DatasetProfile::Refcoco | DatasetProfile::RefcocoPlus, _) => (
                    "test_generic",
                    assets::TEST_GENERIC,
                    ICE_TEST_GENERIC,
                    assets::EX_TEST_GROUNDING,
                    &[GENERIC_WORDS_GUIDELINE, GENERIC_LLM_GUIDELINE],
                ),
            };
        let body = drop_lines(template, dropped);
        let user_text = fill(
            &body,
            &[(marker, trim_block(examples)), (QUERY_SLOT, task.query.as_str())],
        );
        Ok(PromptBundle {
            system_text: TEST_SYSTEM_PROMPT.to_string(),
            user_text: user_text.trim_end().to_string(),
            variant: PromptVariant::Test(style),
            template_id: format!("{name}.{}.{}.{TEMPLATE_VERSION}", profile.name(), style),
        })
    }

    /// Code-generation prompt; `tests = None` renders the baseline variant
    /// without the assertion-test guideline and slot.
    pub fn render_code_prompt(
        &self,
        task: &TaskRecord,
        tests: Option<&str>,
    ) -> Result<PromptBundle, PromptError> {
        if task.query.trim().is_empty() {
            return Err(PromptError::EmptyQuery(task.id.clone()));
        }
        if matches!(tests, Some(t) if t.trim().is_empty()) {
            return Err(PromptError::EmptyTests(task.id.clone()));
        }
        let profile = self.profile_for(task.kind);
        let mut dropped: Vec<&str> = Vec::new();
        let mut segments: &[&str] = &[];
        let (name, template, api_marker, api, ice_marker, examples) = match profile {
            DatasetProfile::Gqa | DatasetProfile::Aokvqa => {
                if profile == DatasetProfile::Aokvqa {
                    dropped.push(VQA_FALLBACK_GUIDELINE);
                }
                if tests.is_none() {
                    dropped.push(VQA_TESTS_GUIDELINE);
                    dropped.extend_from_slice(VQA_TESTS_BLOCK);
                }
                (
                    "code_vqa",
                    assets::CODE_VQA,
                    API_CODE_VQA,
                    assets::API_VQA,
                    ICE_CODE_VQA,
                    assets::EX_CODE_VQA,
                )
            }
            DatasetProfile::Refcoco | DatasetProfile::RefcocoPlus => {
                if tests.is_none() {
                    dropped.push(GROUNDING_TESTS_GUIDELINE);
                    dropped.extend_from_slice(GROUNDING_TESTS_BLOCK);
                    segments = GROUNDING_TEST_SEGMENTS;
                }
                let plus = profile == DatasetProfile::RefcocoPlus;
                (
                    if plus { "code_grounding_plus" } else { "code_grounding" },
                    if plus {
                        assets::CODE_GROUNDING_PLUS
                    } else {
                        assets::CODE_GROUNDING
                    },
                    API_CODE_GROUNDING,
                    assets::API_GROUNDING,
                    ICE_CODE_GROUNDING,
                    if plus {
                        assets::EX_CODE_REFCOCO_PLUS
                    } else {
                        assets::EX_CODE_REFCOCO
                    },
                )
            }
        };
        let body = drop_segments(drop_lines(template, &dropped), segments);
        let tests_text = tests.map(|t| t.trim_end()).unwrap_or_default();
        let user_text = fill(
            &body,
            &[
                (api_marker, trim_block(api)),
                (ice_marker, trim_block(examples)),
                (QUERY_SLOT, task.query.as_str()),
                (TESTS_SLOT, tests_text),
            ],
        );
        let (variant, tag) = match tests {
            Some(_) => (PromptVariant::Code, "tests"),
            None => (PromptVariant::CodeBaseline, "baseline"),
        };
        Ok(PromptBundle {
            system_text: CODE_SYSTEM_PROMPT.to_string(),
            user_text: user_text.trim_end().to_string(),
            variant,
            template_id: format!("{name}.{}.{tag}.{TEMPLATE_VERSION}", profile.name()),
        })
    }
}
