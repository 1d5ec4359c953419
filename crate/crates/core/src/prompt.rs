//! Prompt assembly.
//!
//! A prompt is an ordered list of sections rendered with a fixed header
//! line each and a blank line between them. Assembly is a pure function of
//! its inputs, so identical inputs give byte-identical prompts.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{render_subset, DataSubset};
use crate::response::AnalyticSpecification;
use crate::taxonomy::{builtin_followups, builtin_tasks, serialize_followups, serialize_tasks};

/// Initial-mode key instruction (verbatim core).
pub const KEY_INSTRUCTION_INITIAL: &str = "classify the below natural language queries into the respective analytic tasks they map to. There can be one or more analytic tasks detected in the input natural language query. Return the visualization type in the form of a Vega-Lite specification where it reads data from the url above.";

/// Follow-up-mode key instruction (verbatim core).
pub const KEY_INSTRUCTION_FOLLOWUP: &str = "classify the below natural language query into the respective follow-up operations they map to. Utilize the previous analytic specification (including the attributeMap, taskMap, and visList) and modify this specification to reflect the changes specified and requested in the natural language query. Return the visualization type in the form of a Vega-Lite specification where it reads data from the url above.";

/// Appended when `json_only` is set; omitted in explanation mode.
pub const PROSE_SUPPRESSION: &str =
    "Do not include any additional prose in your response. I only want to see the JSON.";

pub const RESPONSE_EXEMPLAR: &str = include_str!("../data/response_exemplar.json");

const RESPONSE_LEAD: &str = "Here is the JSON object that the response should be returned as:";

const FULLY_SPECIFIED_BLOCK: &str = "Fully specified queries: a fully specified query explicitly references at least one attribute, one analytic task and one visualization type. Apply the instruction above directly and use the requested visualization type.";

const UNDERSPECIFIED_BLOCK: &str = "Underspecified queries: an underspecified query implicitly refers to tasks and visualizations. If the query does not explicitly mention an analytic task or a visualization type, use the design guidelines in the analytic task JSON: infer the task that is best suited with the detected attributes' datatypes, then generate a visualization specification using this inferred task and detected attributes.";

const AMBIGUOUS_BLOCK: &str = "Ambiguous queries: an ambiguous query contains phrases with partial references to multiple data attributes, such as a keyword that matches several column names. Output multiple visualizations, one for every attribute that the keyword potentially refers to, and list each of those attributes in the attributeMap.";

const FOLLOWUP_BLOCK: &str = "Follow-up queries: a follow-up query adds, removes or replaces attributes, analytic tasks or visualization types of a previously generated analytic specification. When a previous analytic specification is included at the end of this prompt, apply the matching operation from the conversational interaction JSON to it rather than building a new specification from scratch.";

const GENERAL_RULES: &str = "Use attribute names exactly as they are written in the dataset headers. When a query asks for a value computed from several attributes, add the new attribute to the attributeMap with \"isDerived\": true and a derivationNote naming the attributes it is computed from, and compute it with a calculate transform.";

pub const DEFAULT_TOKEN_BUDGET: usize = 8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Initial,
    FollowUp,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Only the final taxonomy iteration is a runtime option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyVersion {
    #[default]
    V5,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub mode: Mode,
    pub json_only: bool,
    pub token_budget: usize,
    pub seed: u64,
    pub taxonomy_version: TaxonomyVersion,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: Mode::Initial,
            json_only: true,
            token_budget: DEFAULT_TOKEN_BUDGET,
            seed: 0,
            taxonomy_version: TaxonomyVersion::V5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionId {
    TaskTaxonomy,
    FollowUpTaxonomy,
    Instructions,
    ResponseSchemaExample,
    DataSubset,
    PreviousSpecification,
    Queries,
}

impl SectionId {
    pub fn header(self) -> &'static str {
        match self {
            SectionId::TaskTaxonomy => "### Analytic Task JSON",
            SectionId::FollowUpTaxonomy => "### Conversational Interaction JSON",
            SectionId::Instructions => "### Instructions",
            SectionId::ResponseSchemaExample => "### Response JSON",
            SectionId::DataSubset => "### Data Subset",
            SectionId::PreviousSpecification => "### Previous Analytic Specification",
            SectionId::Queries => "### Natural Language Queries",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub id: SectionId,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub sections: Vec<Section>,
    pub estimated_tokens: usize,
    pub config_snapshot: PromptConfig,
}

impl AssembledPrompt {
    pub fn section(&self, id: SectionId) -> Option<&str> {
        self.sections.iter().find(|s| s.id == id).map(|s| s.body.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("at least one non-blank query is required")]
    EmptyQuery,
    #[error("follow-up mode requires a previous analytic specification")]
    MissingPreviousSpec,
    #[error("a previous analytic specification was supplied in initial mode")]
    UnexpectedPreviousSpec,
    #[error("prompt needs ~{estimated} tokens, budget is {budget}; shrink the data subset or raise the budget")]
    TokenBudgetExceeded { estimated: usize, budget: usize },
}

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

fn fenced_json(json: &str) -> String {
    format!("```json\n{}\n```", json.trim_end())
}

fn instructions(subset: &DataSubset, config: &PromptConfig) -> String {
    let key = match config.mode {
        Mode::Initial => format!(
            "Using the analytic task JSON and the conversational interaction JSON above, {KEY_INSTRUCTION_INITIAL}"
        ),
        Mode::FollowUp => format!("Using the conversational interaction JSON above, {KEY_INSTRUCTION_FOLLOWUP}"),
    };
    let mut parts = vec![
        format!(
            "The dataset for these queries is available at the url: {}. Its column headers and a random sample of its rows are listed in the Data Subset section.",
            subset.source
        ),
        key,
        FULLY_SPECIFIED_BLOCK.to_string(),
        UNDERSPECIFIED_BLOCK.to_string(),
        AMBIGUOUS_BLOCK.to_string(),
        FOLLOWUP_BLOCK.to_string(),
        GENERAL_RULES.to_string(),
    ];
    if config.json_only {
        parts.push(PROSE_SUPPRESSION.to_string());
    }
    parts.join("\n\n")
}

/// Composes every prompt section. Fails if the rendered prompt would not
/// fit in `config.token_budget`.
pub fn assemble(
    subset: &DataSubset,
    queries: &[String],
    config: &PromptConfig,
    previous: Option<&AnalyticSpecification>,
) -> Result<AssembledPrompt, PromptError> {
    if queries.is_empty() || queries.iter().any(|q| q.trim().is_empty()) {
        return Err(PromptError::EmptyQuery);
    }
    match (config.mode, previous) {
        (Mode::FollowUp, None) => return Err(PromptError::MissingPreviousSpec),
        (Mode::Initial, Some(_)) => return Err(PromptError::UnexpectedPreviousSpec),
        _ => {}
    }

    // Built-in taxonomy lists are non-empty.
    let tasks = serialize_tasks(&builtin_tasks()).expect("built-in tasks");
    let followups = serialize_followups(&builtin_followups()).expect("built-in follow-ups");

    let mut sections = vec![
        Section {
            id: SectionId::TaskTaxonomy,
            body: format!(
                "The JSON below describes the low-level analytic tasks, the attribute datatypes and visual encodings each task prefers, how to express those encodings in Vega-Lite, and the visualizations recommended for each task.\n{}",
                fenced_json(&tasks)
            ),
        },
        Section {
            id: SectionId::FollowUpTaxonomy,
            body: format!(
                "The JSON below lists the follow-up operations: every combination of an action (add, remove, replace) with a target (attribute, analytic task, visualization type), the steps to apply it to a previous analytic specification, and example follow-up queries.\n{}",
                fenced_json(&followups)
            ),
        },
        Section {
            id: SectionId::Instructions,
            body: instructions(subset, config),
        },
        Section {
            id: SectionId::ResponseSchemaExample,
            body: format!("{RESPONSE_LEAD}\n{}", fenced_json(RESPONSE_EXEMPLAR)),
        },
        Section {
            id: SectionId::DataSubset,
            body: format!(
                "Dataset `{}`: all {} column headers and {} randomly sampled rows.\n{}",
                subset.dataset_id,
                subset.headers.len(),
                subset.sample_rows.len(),
                render_subset(subset)
            ),
        },
    ];
    if let Some(prev) = previous {
        sections.push(Section {
            id: SectionId::PreviousSpecification,
            body: format!(
                "This is the previously generated analytic specification that the follow-up query modifies:\n{}",
                fenced_json(&prev.to_response_json())
            ),
        });
    }
    let numbered: Vec<String> = queries.iter().enumerate().map(|(i, q)| format!("{}. {}", i + 1, q.trim())).collect();
    sections.push(Section { id: SectionId::Queries, body: numbered.join("\n") });

    let mut prompt = AssembledPrompt { sections, estimated_tokens: 0, config_snapshot: config.clone() };
    let estimated = estimate_tokens(&render(&prompt));
    if estimated > config.token_budget {
        return Err(PromptError::TokenBudgetExceeded { estimated, budget: config.token_budget });
    }
    prompt.estimated_tokens = estimated;
    Ok(prompt)
}

/// Header line, newline, body; sections separated by a blank line; one
/// trailing newline.
pub fn render(prompt: &AssembledPrompt) -> String {
    let mut out =
        prompt.sections.iter().map(|s| format!("{}\n{}", s.id.header(), s.body)).collect::<Vec<_>>().join("\n\n");
    out.push('\n');
    out
}
