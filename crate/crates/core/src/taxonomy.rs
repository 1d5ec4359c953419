//! Analytic-task and follow-up-operation knowledge injected into the prompt.
//!
//! The shipped content lives in `data/taxonomy.v5.json`, which is itself in
//! canonical form: `serialize_taxonomy(builtin_tasks(), builtin_followups())`
//! reproduces the file byte for byte. Earlier prompt iterations (v1 to v4)
//! are kept next to it as historical fixtures only.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Datatype;

pub const TAXONOMY_V5: &str = include_str!("../data/taxonomy.v5.json");

/// Historical prompt iterations, oldest first. Not runtime modes.
pub const HISTORICAL_TAXONOMIES: [(u32, &str); 4] = [
    (1, include_str!("../data/taxonomy.v1.json")),
    (2, include_str!("../data/taxonomy.v2.json")),
    (3, include_str!("../data/taxonomy.v3.json")),
    (4, include_str!("../data/taxonomy.v4.json")),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("task `{task}` has an empty `{property}`")]
    EmptyProperty { task: String, property: &'static str },
    #[error("follow-up ({action}, {target}) has an empty `{property}`")]
    EmptyFollowUpProperty { action: FollowUpAction, target: FollowUpTarget, property: &'static str },
    #[error("cannot serialize an empty {0} list")]
    EmptyList(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Correlation,
    Distribution,
    #[serde(rename = "Derived Value")]
    DerivedValue,
    Trend,
    Filter,
    Sort,
    #[serde(rename = "Find Extremum")]
    FindExtremum,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Correlation,
        TaskKind::Distribution,
        TaskKind::DerivedValue,
        TaskKind::Trend,
        TaskKind::Filter,
        TaskKind::Sort,
        TaskKind::FindExtremum,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::Correlation => "Correlation",
            TaskKind::Distribution => "Distribution",
            TaskKind::DerivedValue => "Derived Value",
            TaskKind::Trend => "Trend",
            TaskKind::Filter => "Filter",
            TaskKind::Sort => "Sort",
            TaskKind::FindExtremum => "Find Extremum",
        }
    }

    /// Resolves a task-map key. Case, spaces, `_` and `-` are ignored, so
    /// `"Derived Value"`, `"derived_value"` and `"DerivedValue"` all match.
    pub fn from_key(key: &str) -> Option<Self> {
        let norm = |s: &str| {
            s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect::<String>()
        };
        let k = norm(key);
        Self::ALL.into_iter().find(|t| norm(t.display_name()) == k)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Encoding channels named in task definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "X axis")]
    XAxis,
    #[serde(rename = "Y axis")]
    YAxis,
    Color,
    Size,
    Row,
    Column,
    Theta,
}

impl Channel {
    /// Vega-Lite encoding channel key.
    pub fn vega_lite_key(self) -> &'static str {
        match self {
            Channel::XAxis => "x",
            Channel::YAxis => "y",
            Channel::Color => "color",
            Channel::Size => "size",
            Channel::Row => "row",
            Channel::Column => "column",
            Channel::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EncodingRule {
    pub channel: Channel,
    pub data_types: BTreeSet<Datatype>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct TaskDefinitionWire {
    name: TaskKind,
    description: String,
    pro_forma_abstract: String,
    examples: Vec<String>,
    #[serde(rename = "attributeDataTypesAndVisualEncodings")]
    encoding_rules: Vec<EncodingRule>,
    #[serde(rename = "attributesAndVisualEncodingsDescription")]
    encoding_description: String,
    #[serde(rename = "recommendedVisualization")]
    recommended_visualizations: Vec<String>,
}

/// One analytic task with all seven documented properties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaskDefinitionWire", into = "TaskDefinitionWire")]
pub struct TaskDefinition {
    pub name: TaskKind,
    pub description: String,
    pub pro_forma_abstract: String,
    pub examples: Vec<String>,
    pub encoding_rules: Vec<EncodingRule>,
    pub encoding_description: String,
    pub recommended_visualizations: Vec<String>,
}

impl TaskDefinition {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: TaskKind,
        description: impl Into<String>,
        pro_forma_abstract: impl Into<String>,
        examples: Vec<String>,
        encoding_rules: Vec<EncodingRule>,
        encoding_description: impl Into<String>,
        recommended_visualizations: Vec<String>,
    ) -> Result<Self, TaxonomyError> {
        let def = TaskDefinition {
            name,
            description: description.into(),
            pro_forma_abstract: pro_forma_abstract.into(),
            examples,
            encoding_rules,
            encoding_description: encoding_description.into(),
            recommended_visualizations,
        };
        def.check()?;
        Ok(def)
    }

    fn check(&self) -> Result<(), TaxonomyError> {
        let empty = |property| Err(TaxonomyError::EmptyProperty { task: self.name.to_string(), property });
        if self.description.trim().is_empty() {
            return empty("description");
        }
        if self.pro_forma_abstract.trim().is_empty() {
            return empty("proFormaAbstract");
        }
        if self.examples.is_empty() || self.examples.iter().any(|e| e.trim().is_empty()) {
            return empty("examples");
        }
        if self.encoding_rules.is_empty() || self.encoding_rules.iter().any(|r| r.data_types.is_empty()) {
            return empty("attributeDataTypesAndVisualEncodings");
        }
        if self.encoding_description.trim().is_empty() {
            return empty("attributesAndVisualEncodingsDescription");
        }
        if self.recommended_visualizations.is_empty() {
            return empty("recommendedVisualization");
        }
        Ok(())
    }
}

impl TryFrom<TaskDefinitionWire> for TaskDefinition {
    type Error = TaxonomyError;

    fn try_from(w: TaskDefinitionWire) -> Result<Self, Self::Error> {
        TaskDefinition::new(
            w.name,
            w.description,
            w.pro_forma_abstract,
            w.examples,
            w.encoding_rules,
            w.encoding_description,
            w.recommended_visualizations,
        )
    }
}

impl From<TaskDefinition> for TaskDefinitionWire {
    fn from(d: TaskDefinition) -> Self {
        TaskDefinitionWire {
            name: d.name,
            description: d.description,
            pro_forma_abstract: d.pro_forma_abstract,
            examples: d.examples,
            encoding_rules: d.encoding_rules,
            encoding_description: d.encoding_description,
            recommended_visualizations: d.recommended_visualizations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FollowUpAction {
    Add,
    Remove,
    Replace,
}

impl FollowUpAction {
    pub const ALL: [FollowUpAction; 3] = [FollowUpAction::Add, FollowUpAction::Remove, FollowUpAction::Replace];
}

impl fmt::Display for FollowUpAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FollowUpTarget {
    Attribute,
    #[serde(rename = "Analytic Task")]
    Task,
    #[serde(rename = "Visualization Type")]
    VisualizationType,
}

impl FollowUpTarget {
    pub const ALL: [FollowUpTarget; 3] =
        [FollowUpTarget::Attribute, FollowUpTarget::Task, FollowUpTarget::VisualizationType];
}

impl fmt::Display for FollowUpTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct FollowUpWire {
    action: FollowUpAction,
    target: FollowUpTarget,
    instructions: String,
    examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FollowUpWire", into = "FollowUpWire")]
pub struct FollowUpOperation {
    pub action: FollowUpAction,
    pub target: FollowUpTarget,
    pub instructions: String,
    pub examples: Vec<String>,
}

impl FollowUpOperation {
    pub fn new(
        action: FollowUpAction,
        target: FollowUpTarget,
        instructions: impl Into<String>,
        examples: Vec<String>,
    ) -> Result<Self, TaxonomyError> {
        let instructions = instructions.into();
        let empty = |property| TaxonomyError::EmptyFollowUpProperty { action, target, property };
        if instructions.trim().is_empty() {
            return Err(empty("instructions"));
        }
        if examples.is_empty() || examples.iter().any(|e| e.trim().is_empty()) {
            return Err(empty("examples"));
        }
        Ok(FollowUpOperation { action, target, instructions, examples })
    }

    pub fn key(&self) -> (FollowUpAction, FollowUpTarget) {
        (self.action, self.target)
    }
}

impl TryFrom<FollowUpWire> for FollowUpOperation {
    type Error = TaxonomyError;

    fn try_from(w: FollowUpWire) -> Result<Self, Self::Error> {
        FollowUpOperation::new(w.action, w.target, w.instructions, w.examples)
    }
}

impl From<FollowUpOperation> for FollowUpWire {
    fn from(f: FollowUpOperation) -> Self {
        FollowUpWire { action: f.action, target: f.target, instructions: f.instructions, examples: f.examples }
    }
}

/// Top-level layout of a taxonomy data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TaxonomyDocument {
    pub version: u32,
    pub analytic_tasks: Vec<TaskDefinition>,
    pub conversational_interaction: Vec<FollowUpOperation>,
}

fn builtin_document() -> TaxonomyDocument {
    // The data file is compiled in and covered by tests.
    serde_json::from_str(TAXONOMY_V5).expect("taxonomy.v5.json is valid")
}

/// The seven analytic tasks, in canonical order.
pub fn builtin_tasks() -> Vec<TaskDefinition> {
    builtin_document().analytic_tasks
}

/// The nine (action, target) follow-up permutations, row-major.
pub fn builtin_followups() -> Vec<FollowUpOperation> {
    builtin_document().conversational_interaction
}

fn sorted_tasks(tasks: &[TaskDefinition]) -> Vec<TaskDefinition> {
    let mut tasks = tasks.to_vec();
    tasks.sort_by_key(|t| t.name);
    tasks
}

fn sorted_followups(followups: &[FollowUpOperation]) -> Vec<FollowUpOperation> {
    let mut followups = followups.to_vec();
    followups.sort_by_key(FollowUpOperation::key);
    followups
}

fn to_canonical_json<T: Serialize>(value: &T) -> String {
    // Plain data with string keys always serializes.
    serde_json::to_string_pretty(value).expect("taxonomy serializes")
}

/// Canonical JSON for the task list alone (the prompt's task section).
pub fn serialize_tasks(tasks: &[TaskDefinition]) -> Result<String, TaxonomyError> {
    if tasks.is_empty() {
        return Err(TaxonomyError::EmptyList("task"));
    }
    Ok(to_canonical_json(&sorted_tasks(tasks)))
}

/// Canonical JSON for the follow-up list alone.
pub fn serialize_followups(followups: &[FollowUpOperation]) -> Result<String, TaxonomyError> {
    if followups.is_empty() {
        return Err(TaxonomyError::EmptyList("follow-up"));
    }
    Ok(to_canonical_json(&sorted_followups(followups)))
}

/// Canonical taxonomy document: fixed key order, two-space indentation,
/// tasks in enum order, follow-ups in (action, target) row-major order,
/// trailing newline.
pub fn serialize_taxonomy(tasks: &[TaskDefinition], followups: &[FollowUpOperation]) -> Result<String, TaxonomyError> {
    if tasks.is_empty() {
        return Err(TaxonomyError::EmptyList("task"));
    }
    if followups.is_empty() {
        return Err(TaxonomyError::EmptyList("follow-up"));
    }
    let doc = TaxonomyDocument {
        version: 5,
        analytic_tasks: sorted_tasks(tasks),
        conversational_interaction: sorted_followups(followups),
    };
    let mut out = to_canonical_json(&doc);
    out.push('\n');
    Ok(out)
}
