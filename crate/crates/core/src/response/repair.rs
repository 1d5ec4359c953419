use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse, validate, AnalyticSpecification, ValidationReport};
use crate::dataset::Dataset;
use crate::llm::{Client, LlmError};
use crate::prompt::{PROSE_SUPPRESSION, RESPONSE_EXEMPLAR};

/// One model reply and how it fared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub raw_text: String,
    pub report: ValidationReport,
    pub latency_seconds: f64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub specification: AnalyticSpecification,
    pub report: ValidationReport,
    pub attempt: Attempt,
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("repair requested for a response that is not invalid")]
    NotInvalid,
    #[error("repair failed: the corrected response is still invalid")]
    RepairFailed { original: ValidationReport, repaired: ValidationReport, attempt: Attempt },
    #[error("repair request failed: {0}")]
    Provider(#[from] LlmError),
}

/// The original prompt plus a corrective suffix quoting every error finding
/// and the response exemplar.
pub fn repair_prompt(original_prompt: &str, report: &ValidationReport) -> String {
    let errors: String = report.errors().map(|f| format!("- [{}] {}\n", f.code, f.detail)).collect();
    format!(
        "{original_prompt}\n\n### Correction Request\n\
         Your previous response could not be used because of these errors:\n\
         {errors}\n\
         Answer the queries again. Return the complete analytic specification as one JSON object in exactly this shape:\n\
         {RESPONSE_EXEMPLAR}\n\
         {PROSE_SUPPRESSION}"
    )
}

/// Parses and validates a reply, folding parse failures into the report.
pub fn evaluate_reply(
    raw: &str,
    dataset: &Dataset,
    grounding: &str,
) -> (Option<AnalyticSpecification>, ValidationReport) {
    match parse(raw) {
        Ok(spec) => {
            let report = validate(&spec, dataset, grounding);
            (Some(spec), report)
        }
        Err(e) => (None, ValidationReport::malformed(e.to_string())),
    }
}

/// Re-sends the prompt with a corrective suffix, then re-parses and
/// re-validates. Exactly one round-trip.
#[allow(clippy::result_large_err)]
pub fn repair(
    report: &ValidationReport,
    original_prompt: &str,
    client: &Client,
    dataset: &Dataset,
    query: &str,
) -> Result<Repaired, RepairError> {
    if !report.is_invalid() {
        return Err(RepairError::NotInvalid);
    }
    let completion = client.complete(&repair_prompt(original_prompt, report))?;
    let (spec, new_report) = evaluate_reply(&completion.raw_text, dataset, query);
    let attempt = Attempt {
        raw_text: completion.raw_text,
        report: new_report.clone(),
        latency_seconds: completion.latency_seconds,
        attempt_count: completion.attempt_count,
    };
    match spec {
        Some(specification) if !new_report.is_invalid() => Ok(Repaired { specification, report: new_report, attempt }),
        _ => Err(RepairError::RepairFailed { original: report.clone(), repaired: new_report, attempt }),
    }
}
