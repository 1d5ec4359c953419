use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{AnalyticSpecification, CHANNEL_VOCABULARY, MARK_VOCABULARY};
use crate::dataset::{Dataset, Datatype};
use crate::taxonomy::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FindingCode {
    MalformedJson,
    UnknownAttribute,
    UngroundedPhrase,
    UnknownTask,
    InvalidVegaLite,
    FieldTitleMismatch,
    EmptyVisList,
    TaskAttributeOrphan,
    /// An ambiguous phrase's candidate attribute has no visualization.
    AmbiguityUncovered,
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: FindingCode,
    pub detail: String,
}

impl Finding {
    pub fn error(code: FindingCode, detail: impl Into<String>) -> Self {
        Finding { severity: Severity::Error, code, detail: detail.into() }
    }

    pub fn warning(code: FindingCode, detail: impl Into<String>) -> Self {
        Finding { severity: Severity::Warning, code, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    ValidWithWarnings,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn from_findings(findings: Vec<Finding>) -> Self {
        let verdict = if findings.iter().any(|f| f.severity == Severity::Error) {
            Verdict::Invalid
        } else if findings.is_empty() {
            Verdict::Valid
        } else {
            Verdict::ValidWithWarnings
        };
        ValidationReport { verdict, findings }
    }

    pub fn malformed(detail: impl Into<String>) -> Self {
        Self::from_findings(vec![Finding::error(FindingCode::MalformedJson, detail)])
    }

    pub fn is_invalid(&self) -> bool {
        self.verdict == Verdict::Invalid
    }

    pub fn codes(&self) -> Vec<FindingCode> {
        self.findings.iter().map(|f| f.code).collect()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    /// Concatenates findings and recomputes the verdict.
    pub fn merged(&self, other: &ValidationReport) -> ValidationReport {
        let mut findings = self.findings.clone();
        findings.extend(other.findings.iter().cloned());
        ValidationReport::from_findings(findings)
    }
}

/// Lowercase, alphanumerics only.
pub fn normalize_title(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

fn names_source_attribute(note: &str, dataset: &Dataset) -> bool {
    let note = note.to_lowercase();
    dataset.attribute_names().any(|a| note.contains(&a.to_lowercase()))
}

/// Checks a parsed specification against the dataset, the query and the
/// structural Vega-Lite subset. Findings come out in check order.
pub fn validate(spec: &AnalyticSpecification, dataset: &Dataset, query: &str) -> ValidationReport {
    let mut findings = Vec::new();
    let query_lc = query.to_lowercase();
    let derived: HashSet<&str> = spec.derived_attributes().map(|(k, _)| k.as_str()).collect();

    // Attributes exist; derived ones name their sources.
    for (name, mapping) in &spec.attribute_map {
        if mapping.is_derived {
            let grounded = mapping.derivation_note.as_deref().is_some_and(|n| names_source_attribute(n, dataset));
            if !grounded {
                findings.push(Finding::error(
                    FindingCode::UnknownAttribute,
                    format!("derived attribute `{name}` has no derivation note naming a dataset attribute"),
                ));
            }
        } else if dataset.attribute(name).is_none() {
            findings.push(Finding::error(
                FindingCode::UnknownAttribute,
                format!("`{name}` is not an attribute of dataset `{}`", dataset.id),
            ));
        }
    }

    // Query phrases are grounded in the query text.
    for (name, mapping) in &spec.attribute_map {
        let phrase = mapping.query_phrase.trim();
        if !phrase.is_empty() && !query_lc.contains(&phrase.to_lowercase()) {
            findings.push(Finding::warning(
                FindingCode::UngroundedPhrase,
                format!("phrase `{phrase}` for `{name}` does not occur in the query"),
            ));
        }
    }

    // Task names come from the taxonomy.
    for task in spec.task_map.keys() {
        if TaskKind::from_key(task).is_none() {
            findings.push(Finding::error(FindingCode::UnknownTask, format!("`{task}` is not a known analytic task")));
        }
    }

    // Task entries only reference detected attributes.
    for (task, entries) in &spec.task_map {
        for attr in entries.iter().flat_map(|e| &e.attributes) {
            if !spec.attribute_map.contains_key(attr) {
                findings.push(Finding::error(
                    FindingCode::TaskAttributeOrphan,
                    format!("task `{task}` references `{attr}`, which is not in the attributeMap"),
                ));
            }
        }
    }

    // Structural Vega-Lite subset.
    for (i, vis) in spec.vis_list.iter().enumerate() {
        if !vis.vl_spec.is_object() {
            findings
                .push(Finding::error(FindingCode::InvalidVegaLite, format!("visList[{i}]: vlSpec is not an object")));
            continue;
        }
        if !MARK_VOCABULARY.contains(&vis.mark.as_str()) {
            findings.push(Finding::error(
                FindingCode::InvalidVegaLite,
                format!("visList[{i}]: unsupported mark `{}`", vis.mark),
            ));
        }
        let produced = vis.transform_outputs();
        for (channel, enc) in &vis.encodings {
            if !CHANNEL_VOCABULARY.contains(&channel.as_str()) {
                findings.push(Finding::error(
                    FindingCode::InvalidVegaLite,
                    format!("visList[{i}]: unsupported channel `{channel}`"),
                ));
            }
            if let Some(t) = &enc.datatype {
                if Datatype::from_vega_lite_type(t).is_none() {
                    findings.push(Finding::error(
                        FindingCode::InvalidVegaLite,
                        format!("visList[{i}].{channel}: unknown type `{t}`"),
                    ));
                }
            }
            if let Some(field) = &enc.field {
                let resolves = dataset.attribute(field).is_some()
                    || derived.contains(field.as_str())
                    || produced.iter().any(|p| p == field);
                if !resolves {
                    findings.push(Finding::error(
                        FindingCode::InvalidVegaLite,
                        format!("visList[{i}].{channel}: field `{field}` does not resolve"),
                    ));
                }
            }
        }
    }

    // Axis titles that name a different attribute than the encoded field.
    let title_targets: Vec<(&str, String)> =
        dataset.attribute_names().chain(derived.iter().copied()).map(|n| (n, normalize_title(n))).collect();
    for (i, vis) in spec.vis_list.iter().enumerate() {
        for (channel, enc) in &vis.encodings {
            let (Some(field), Some(title)) = (&enc.field, &enc.axis_title) else {
                continue;
            };
            let title_n = normalize_title(title);
            let field_n = normalize_title(field);
            if title_n.contains(&field_n) {
                continue;
            }
            // Longest other attribute named by the title.
            let other = title_targets
                .iter()
                .filter(|(_, n)| n.len() >= 3 && *n != field_n && title_n.contains(n.as_str()))
                .max_by_key(|(_, n)| n.len());
            if let Some((other, _)) = other {
                findings.push(Finding::warning(
                    FindingCode::FieldTitleMismatch,
                    format!("visList[{i}].{channel}: titled `{title}` (attribute `{other}`) but encodes `{field}`"),
                ));
            }
        }
    }

    if spec.vis_list.is_empty() {
        findings.push(Finding::error(FindingCode::EmptyVisList, "visList is empty"));
    }

    ValidationReport::from_findings(findings)
}

/// For every ambiguous phrase, each candidate attribute must be encoded by at
/// least one visualization. One warning per uncovered candidate.
pub fn validate_ambiguity_coverage(
    spec: &AnalyticSpecification,
    candidates: &IndexMap<String, Vec<String>>,
) -> ValidationReport {
    let findings = candidates
        .iter()
        .flat_map(|(phrase, attrs)| attrs.iter().map(move |a| (phrase, a)))
        .filter(|(_, attr)| !spec.vis_list.iter().any(|v| v.references(attr)))
        .map(|(phrase, attr)| {
            Finding::warning(
                FindingCode::AmbiguityUncovered,
                format!("no visualization encodes `{attr}`, a candidate for `{phrase}`"),
            )
        })
        .collect();
    ValidationReport::from_findings(findings)
}
