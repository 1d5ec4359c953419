//! One query through the whole chain: assemble, complete, parse, validate,
//! and repair when the reply is invalid.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DataSubset, Dataset};
use crate::llm::{prompt_digest, Client, LlmError};
use crate::prompt::{assemble, render, Mode, PromptConfig, PromptError, DEFAULT_TOKEN_BUDGET};
use crate::response::{
    evaluate_reply, repair, AnalyticSpecification, Attempt, FindingCode, RepairError, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub json_only: bool,
    pub token_budget: usize,
    /// Corrective round-trips allowed per query; 0 disables repair.
    pub repair_rounds: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { json_only: true, token_budget: DEFAULT_TOKEN_BUDGET, repair_rounds: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurnErrorKind {
    /// The provider never produced a usable reply.
    Provider,
    /// A reply arrived but no valid specification could be obtained from it.
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnError {
    pub kind: TurnErrorKind,
    pub code: String,
    pub message: String,
}

impl From<&LlmError> for TurnError {
    fn from(e: &LlmError) -> Self {
        TurnError { kind: TurnErrorKind::Provider, code: e.code().to_string(), message: e.to_string() }
    }
}

/// Outcome of a single query. `specification` is present iff `error` is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub mode: Mode,
    pub specification: Option<AnalyticSpecification>,
    /// Report for the final reply; absent when no reply was received.
    pub report: Option<ValidationReport>,
    /// Wall-clock time for the turn, including retries and repair.
    pub latency_seconds: f64,
    pub error: Option<TurnError>,
    pub attempts: Vec<Attempt>,
    pub prompt_digest: String,
}

impl Turn {
    pub fn succeeded(&self) -> bool {
        self.specification.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub client: Client,
    pub config: PipelineConfig,
}

/// Inputs for one query beyond the dataset itself.
pub struct QueryRequest<'a> {
    pub subset: &'a DataSubset,
    pub query: &'a str,
    pub mode: Mode,
    pub previous: Option<&'a AnalyticSpecification>,
    /// Text that query phrases must be found in. For follow-ups this is the
    /// conversation so far, since carried-over phrases come from earlier turns.
    pub grounding: &'a str,
}

impl Pipeline {
    pub fn new(client: Client, config: PipelineConfig) -> Self {
        Pipeline { client, config }
    }

    pub fn prompt_config(&self, mode: Mode, seed: u64) -> PromptConfig {
        PromptConfig {
            mode,
            json_only: self.config.json_only,
            token_budget: self.config.token_budget,
            seed,
            ..PromptConfig::default()
        }
    }

    /// Rendered prompt text for a request, without calling the provider.
    pub fn prompt_text(&self, req: &QueryRequest<'_>) -> Result<String, PromptError> {
        let cfg = self.prompt_config(req.mode, req.subset.seed);
        let assembled = assemble(req.subset, &[req.query.to_string()], &cfg, req.previous)?;
        Ok(render(&assembled))
    }

    /// Runs one query. Prompt preconditions fail with `Err`; provider and
    /// response failures are recorded inside the returned turn.
    pub fn run(&self, dataset: &Dataset, req: &QueryRequest<'_>) -> Result<Turn, PromptError> {
        let prompt = self.prompt_text(req)?;
        let started = Instant::now();
        let mut turn = Turn {
            query: req.query.to_string(),
            mode: req.mode,
            specification: None,
            report: None,
            latency_seconds: 0.0,
            error: None,
            attempts: Vec::new(),
            prompt_digest: prompt_digest(&prompt),
        };

        let completion = match self.client.complete(&prompt) {
            Ok(c) => c,
            Err(e) => {
                turn.error = Some((&e).into());
                turn.latency_seconds = started.elapsed().as_secs_f64();
                return Ok(turn);
            }
        };
        let (mut spec, mut report) = evaluate_reply(&completion.raw_text, dataset, req.grounding);
        turn.attempts.push(Attempt {
            raw_text: completion.raw_text,
            report: report.clone(),
            latency_seconds: completion.latency_seconds,
            attempt_count: completion.attempt_count,
        });

        let mut rounds = 0;
        let mut repair_failed = false;
        while report.is_invalid() && rounds < self.config.repair_rounds {
            rounds += 1;
            match repair(&report, &prompt, &self.client, dataset, req.grounding) {
                Ok(repaired) => {
                    spec = Some(repaired.specification);
                    report = repaired.report;
                    turn.attempts.push(repaired.attempt);
                    repair_failed = false;
                }
                Err(RepairError::RepairFailed { repaired, attempt, .. }) => {
                    report = repaired;
                    turn.attempts.push(attempt);
                    repair_failed = true;
                }
                Err(RepairError::Provider(e)) => {
                    turn.error = Some((&e).into());
                    break;
                }
                Err(RepairError::NotInvalid) => break,
            }
        }

        turn.latency_seconds = started.elapsed().as_secs_f64();
        if turn.error.is_none() {
            if report.is_invalid() {
                let malformed = spec.is_none() || report.codes().contains(&FindingCode::MalformedJson);
                let code = if repair_failed {
                    "RepairFailed"
                } else if malformed {
                    "MalformedJson"
                } else {
                    "InvalidSpecification"
                };
                turn.error = Some(TurnError {
                    kind: TurnErrorKind::Response,
                    code: code.to_string(),
                    message: report
                        .errors()
                        .map(|f| format!("[{}] {}", f.code, f.detail))
                        .collect::<Vec<_>>()
                        .join("; "),
                });
            } else {
                turn.specification = spec;
            }
        }
        turn.report = Some(report);
        Ok(turn)
    }
}
