//! Corpus replay, annotation reconciliation and accuracy/latency scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::dataset::{DatasetError, DatasetRegistry};
use crate::pipeline::{Pipeline, Turn};
use crate::prompt::Mode;
use crate::response::{validate_ambiguity_coverage, ValidationReport};
use crate::session::{Session, SessionError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus has no cases")]
    EmptyCorpus,
    #[error("unknown dataset `{dataset_id}` in case {case_id}")]
    UnknownDataset { case_id: String, dataset_id: String },
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("case {case_id}: {message}")]
    InvalidCase { case_id: String, message: String },
    #[error("case {case_id}: {source}")]
    Session { case_id: String, source: SessionError },
    #[error("case {case_id} needs 2 primary annotations, found {found}")]
    MissingAnnotation { case_id: String, found: usize },
    #[error("case {0} has more than one annotation from the same annotator")]
    DuplicateAnnotation(String),
    #[error("case {0}: annotators disagree and there is no tiebreaker annotation")]
    MissingTiebreaker(String),
    #[error("annotation for case {case_id} by {annotator_id}: {message}")]
    InvalidAnnotation { case_id: String, annotator_id: String, message: String },
    #[error("cases without a final label: {}", .0.join(", "))]
    UnreconciledCases(Vec<String>),
    #[error("{path}:{line}: {message}")]
    Jsonl { path: String, line: usize, message: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCase {
    pub case_id: String,
    pub dataset_id: String,
    pub query: String,
    #[serde(default = "initial")]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity_candidates: Option<IndexMap<String, Vec<String>>>,
}

fn initial() -> Mode {
    Mode::Initial
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Accurate,
    Inaccurate,
    NoOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reason {
    MissingTask,
    MissingAttribute,
    IncorrectAttribute,
    MalformedOutput,
    InvalidVegaLite,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub case_id: String,
    pub annotator_id: String,
    pub label: Label,
    #[serde(default)]
    pub reasons: Vec<Reason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Annotation {
    pub fn check(&self) -> Result<(), EvalError> {
        let message = match self.label {
            Label::Inaccurate if self.reasons.is_empty() => "Inaccurate needs at least one reason",
            Label::Accurate if !self.reasons.is_empty() => "Accurate must not carry reasons",
            _ => return Ok(()),
        };
        Err(EvalError::InvalidAnnotation {
            case_id: self.case_id.clone(),
            annotator_id: self.annotator_id.clone(),
            message: message.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    /// The pipeline produced a specification.
    Specified,
    /// The pipeline ran but produced no specification.
    Failed,
    /// Not run: the preceding case in the chain produced no specification.
    BrokenChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub dataset_id: String,
    pub status: RecordStatus,
    pub latency_seconds: f64,
    pub report: Option<ValidationReport>,
    pub turn: Option<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciled {
    pub case_id: String,
    pub annotator_labels: BTreeMap<String, Label>,
    pub final_label: Label,
    pub tiebreaker_used: bool,
}

/// Accuracy as exact counts plus a percentage to 2 decimals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accurate: u64,
    pub total: u64,
    /// Hundredths of a percent, truncated: 644 of 740 is 8702.
    pub percent_hundredths: u64,
}

impl Accuracy {
    pub fn new(accurate: u64, total: u64) -> Self {
        Accuracy { accurate, total, percent_hundredths: percent_hundredths(accurate, total) }
    }

    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accurate as f64 / self.total as f64
        }
    }

    /// `"87.02%"`.
    pub fn percent_string(&self) -> String {
        format!("{}.{:02}%", self.percent_hundredths / 100, self.percent_hundredths % 100)
    }
}

/// `accurate / total` as hundredths of a percent, truncated toward zero.
pub fn percent_hundredths(accurate: u64, total: u64) -> u64 {
    (accurate * 10_000).checked_div(total).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub accurate: u64,
    pub inaccurate: u64,
    pub no_output: u64,
}

impl LabelCounts {
    fn add(&mut self, label: Label) {
        match label {
            Label::Accurate => self.accurate += 1,
            Label::Inaccurate => self.inaccurate += 1,
            Label::NoOutput => self.no_output += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.accurate + self.inaccurate + self.no_output
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: Accuracy,
    pub per_dataset_accuracy: BTreeMap<String, Accuracy>,
    pub mean_latency_seconds: f64,
    pub counts: BTreeMap<String, LabelCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub mean_latency_seconds: f64,
    #[serde(default)]
    pub reconciliation: Vec<Reconciled>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Maximum chains in flight; `None` leaves it to the thread pool.
    pub concurrency: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: 42, concurrency: None }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Splits the corpus into chains. Cases without a group run alone; grouped
/// cases run in corpus order.
fn chains(corpus: &[QueryCase]) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut seen = BTreeSet::new();
    let mut groups: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (i, case) in corpus.iter().enumerate() {
        if !seen.insert(case.case_id.as_str()) {
            return Err(EvalError::DuplicateCase(case.case_id.clone()));
        }
        let key = match &case.sequence_group {
            Some(g) => format!("g:{g}"),
            None if case.mode == Mode::FollowUp => {
                return Err(EvalError::InvalidCase {
                    case_id: case.case_id.clone(),
                    message: "follow-up case without a sequence_group".into(),
                })
            }
            None => format!("c:{}", case.case_id),
        };
        groups.entry(key).or_default().push(i);
    }
    for idxs in groups.values() {
        let first = &corpus[idxs[0]];
        if first.mode == Mode::FollowUp {
            return Err(EvalError::InvalidCase {
                case_id: first.case_id.clone(),
                message: "chain starts with a follow-up".into(),
            });
        }
        if let Some(other) = idxs.iter().map(|&i| &corpus[i]).find(|c| c.dataset_id != first.dataset_id) {
            return Err(EvalError::InvalidCase {
                case_id: other.case_id.clone(),
                message: format!("chain mixes datasets {} and {}", first.dataset_id, other.dataset_id),
            });
        }
    }
    Ok(groups.into_values().collect())
}

fn run_chain(
    corpus: &[QueryCase],
    idxs: &[usize],
    registry: &DatasetRegistry,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<Vec<(usize, RunRecord)>, EvalError> {
    let first = &corpus[idxs[0]];
    let dataset = registry.get(&first.dataset_id).map_err(|_| EvalError::UnknownDataset {
        case_id: first.case_id.clone(),
        dataset_id: first.dataset_id.clone(),
    })?;
    let mut session = Session::new(&dataset, seed);
    let mut chain_ok = true;
    let mut out = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let case = &corpus[i];
        if case.mode == Mode::FollowUp && !chain_ok {
            out.push((
                i,
                RunRecord {
                    case_id: case.case_id.clone(),
                    dataset_id: case.dataset_id.clone(),
                    status: RecordStatus::BrokenChain,
                    latency_seconds: 0.0,
                    report: None,
                    turn: None,
                    note: Some("BrokenChain: the preceding case produced no specification".into()),
                },
            ));
            continue;
        }
        let turn = session
            .ask(pipeline, &dataset, &case.query, case.mode)
            .map_err(|source| EvalError::Session { case_id: case.case_id.clone(), source })?
            .clone();
        let mut report = turn.report.clone();
        if let (Some(spec), Some(candidates), Some(r)) =
            (&turn.specification, &case.ambiguity_candidates, report.as_mut())
        {
            *r = r.merged(&validate_ambiguity_coverage(spec, candidates));
        }
        chain_ok = turn.succeeded();
        out.push((
            i,
            RunRecord {
                case_id: case.case_id.clone(),
                dataset_id: case.dataset_id.clone(),
                status: if chain_ok { RecordStatus::Specified } else { RecordStatus::Failed },
                latency_seconds: turn.latency_seconds,
                report,
                note: turn.error.as_ref().map(|e| format!("{}: {}", e.code, e.message)),
                turn: Some(turn),
            },
        ));
    }
    Ok(out)
}

/// Replays a corpus. Independent chains may run concurrently; cases within a
/// chain run in order through one session. Records come back in corpus order.
pub fn run_corpus(
    corpus: &[QueryCase],
    registry: &DatasetRegistry,
    pipeline: &Pipeline,
    options: RunOptions,
) -> Result<RunReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    for case in corpus {
        if let Err(DatasetError::UnknownDataset(_)) = registry.get(&case.dataset_id) {
            return Err(EvalError::UnknownDataset {
                case_id: case.case_id.clone(),
                dataset_id: case.dataset_id.clone(),
            });
        }
    }
    let groups = chains(corpus)?;
    let run = || {
        groups
            .par_iter()
            .map(|idxs| run_chain(corpus, idxs, registry, pipeline, options.seed))
            .collect::<Result<Vec<_>, _>>()
    };
    let results = match options.concurrency {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| EvalError::Io(e.to_string()))?
            .install(run),
        None => run(),
    }?;
    let mut records: Vec<(usize, RunRecord)> = results.into_iter().flatten().collect();
    records.sort_by_key(|(i, _)| *i);
    let records: Vec<RunRecord> = records.into_iter().map(|(_, r)| r).collect();
    Ok(RunReport {
        run_id: Uuid::new_v4().to_string(),
        seed: options.seed,
        mean_latency_seconds: mean(records.iter().map(|r| r.latency_seconds)),
        records,
        reconciliation: Vec::new(),
        metrics: None,
    })
}

/// Final labels from two primary annotators per case, with the tiebreaker
/// deciding disagreements. Output is ordered by case id.
pub fn reconcile(annotations: &[Annotation], tiebreaker_id: &str) -> Result<Vec<Reconciled>, EvalError> {
    let mut primary: BTreeMap<&str, BTreeMap<String, Label>> = BTreeMap::new();
    let mut tiebreak: HashMap<&str, Label> = HashMap::new();
    for a in annotations {
        a.check()?;
        if a.annotator_id == tiebreaker_id {
            if tiebreak.insert(&a.case_id, a.label).is_some() {
                return Err(EvalError::DuplicateAnnotation(a.case_id.clone()));
            }
        } else if primary.entry(&a.case_id).or_default().insert(a.annotator_id.clone(), a.label).is_some() {
            return Err(EvalError::DuplicateAnnotation(a.case_id.clone()));
        }
    }
    for case_id in tiebreak.keys() {
        primary.entry(case_id).or_default();
    }
    primary
        .into_iter()
        .map(|(case_id, labels)| {
            let mut it = labels.values();
            let (a, b) = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => (*a, *b),
                _ => return Err(EvalError::MissingAnnotation { case_id: case_id.to_string(), found: labels.len() }),
            };
            let (final_label, tiebreaker_used) = if a == b {
                (a, false)
            } else {
                let t = tiebreak.get(case_id).ok_or_else(|| EvalError::MissingTiebreaker(case_id.to_string()))?;
                (*t, true)
            };
            let mut annotator_labels = labels;
            if let Some(t) = tiebreak.get(case_id) {
                annotator_labels.insert(tiebreaker_id.to_string(), *t);
            }
            Ok(Reconciled { case_id: case_id.to_string(), annotator_labels, final_label, tiebreaker_used })
        })
        .collect()
}

/// Accuracy and latency metrics. Every record must have a final label.
pub fn score(report: &RunReport) -> Result<Metrics, EvalError> {
    if report.records.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let labels: HashMap<&str, Label> =
        report.reconciliation.iter().map(|r| (r.case_id.as_str(), r.final_label)).collect();
    let missing: Vec<String> =
        report.records.iter().filter(|r| !labels.contains_key(r.case_id.as_str())).map(|r| r.case_id.clone()).collect();
    if !missing.is_empty() {
        return Err(EvalError::UnreconciledCases(missing));
    }
    let mut counts: BTreeMap<String, LabelCounts> = BTreeMap::new();
    let mut all = LabelCounts::default();
    for r in &report.records {
        let label = labels[r.case_id.as_str()];
        counts.entry(r.dataset_id.clone()).or_default().add(label);
        all.add(label);
    }
    Ok(Metrics {
        overall_accuracy: Accuracy::new(all.accurate, all.total()),
        per_dataset_accuracy: counts.iter().map(|(id, c)| (id.clone(), Accuracy::new(c.accurate, c.total()))).collect(),
        mean_latency_seconds: mean(report.records.iter().map(|r| r.latency_seconds)),
        counts,
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_jsonl(&text, &path.display().to_string())
}

/// One JSON value per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Jsonl {
                path: origin.to_string(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<QueryCase>, EvalError> {
    read_jsonl(path.as_ref())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, EvalError> {
    read_jsonl(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_bytes, Format};
    use crate::llm::{prompt_digest, Client, MockFixtures, MockProvider, RetryPolicy, Scripted, ScriptedError};
    use crate::pipeline::{PipelineConfig, QueryRequest};
    use proptest::prelude::*;
    use std::sync::Arc;
    use std::time::Duration;

    fn ann(case: &str, who: &str, label: Label) -> Annotation {
        Annotation {
            case_id: case.into(),
            annotator_id: who.into(),
            label,
            reasons: if label == Label::Inaccurate { vec![Reason::MissingTask] } else { vec![] },
            note: None,
        }
    }

    fn record(case: &str, dataset: &str, latency: f64) -> RunRecord {
        RunRecord {
            case_id: case.into(),
            dataset_id: dataset.into(),
            status: RecordStatus::Specified,
            latency_seconds: latency,
            report: None,
            turn: None,
            note: None,
        }
    }

    fn labelled(accurate: usize, total: usize) -> RunReport {
        let records: Vec<RunRecord> = (0..total).map(|i| record(&format!("c{i}"), "d", 1.0)).collect();
        let reconciliation = (0..total)
            .map(|i| Reconciled {
                case_id: format!("c{i}"),
                annotator_labels: BTreeMap::new(),
                final_label: if i < accurate { Label::Accurate } else { Label::Inaccurate },
                tiebreaker_used: false,
            })
            .collect();
        RunReport { run_id: "r".into(), seed: 0, records, mean_latency_seconds: 1.0, reconciliation, metrics: None }
    }

    #[test]
    fn reported_accuracy_figures() {
        let m = score(&labelled(644, 740)).unwrap();
        assert_eq!(m.overall_accuracy.percent_string(), "87.02%");
        let m = score(&labelled(474, 740)).unwrap();
        assert_eq!(m.overall_accuracy.percent_string(), "64.05%");
        let m = score(&labelled(0, 5)).unwrap();
        assert_eq!(m.overall_accuracy.percent_string(), "0.00%");
        assert_eq!(score(&labelled(5, 5)).unwrap().overall_accuracy.percent_string(), "100.00%");
    }

    #[test]
    fn unreconciled_cases_are_reported() {
        let mut r = labelled(1, 3);
        r.reconciliation.pop();
        assert!(matches!(score(&r), Err(EvalError::UnreconciledCases(c)) if c == vec!["c2".to_string()]));
    }

    #[test]
    fn reconcile_agreement_and_tiebreak() {
        let anns = vec![
            ann("a", "p1", Label::Accurate),
            ann("a", "p2", Label::Accurate),
            ann("b", "p1", Label::Accurate),
            ann("b", "p2", Label::Inaccurate),
            ann("b", "t", Label::Inaccurate),
        ];
        let r = reconcile(&anns, "t").unwrap();
        assert_eq!((r[0].final_label, r[0].tiebreaker_used), (Label::Accurate, false));
        assert_eq!((r[1].final_label, r[1].tiebreaker_used), (Label::Inaccurate, true));
        assert_eq!(r[1].annotator_labels.len(), 3);
    }

    #[test]
    fn reconcile_preconditions() {
        assert!(matches!(
            reconcile(&[ann("a", "p1", Label::Accurate)], "t"),
            Err(EvalError::MissingAnnotation { found: 1, .. })
        ));
        assert!(matches!(
            reconcile(&[ann("a", "p1", Label::Accurate), ann("a", "p2", Label::NoOutput)], "t"),
            Err(EvalError::MissingTiebreaker(_))
        ));
        let mut bad = ann("a", "p1", Label::Inaccurate);
        bad.reasons.clear();
        assert!(matches!(reconcile(&[bad], "t"), Err(EvalError::InvalidAnnotation { .. })));
        assert!(matches!(
            reconcile(&[ann("a", "p1", Label::Accurate), ann("a", "p1", Label::Accurate)], "t"),
            Err(EvalError::DuplicateAnnotation(_))
        ));
    }

    #[test]
    fn corpus_jsonl_defaults() {
        let text = "{\"case_id\":\"1\",\"dataset_id\":\"movies\",\"query\":\"q\"}\n\n\
                    {\"case_id\":\"2\",\"dataset_id\":\"movies\",\"query\":\"r\",\"mode\":\"FollowUp\",\"sequence_group\":\"g\"}\n";
        let cases: Vec<QueryCase> = parse_jsonl(text, "x").unwrap();
        assert_eq!(cases[0].mode, Mode::Initial);
        assert_eq!(cases[1].sequence_group.as_deref(), Some("g"));
        let err = parse_jsonl::<QueryCase>("{}\n", "x").unwrap_err();
        assert!(matches!(err, EvalError::Jsonl { line: 1, .. }));
    }

    const CSV: &str = "Title,Genre,Worldwide Gross\nA,Drama,10\nB,Comedy,20\n";

    fn reply(mark: &str) -> String {
        format!(
            r#"{{"attributeMap":{{"Genre":{{"queryPhrase":"genre"}},"Worldwide Gross":{{"queryPhrase":"gross"}}}},
                "taskMap":{{"Derived Value":[{{"attributes":["Worldwide Gross"]}}]}},
                "visList":[{{"attributes":["Genre","Worldwide Gross"],"tasks":["Derived Value"],
                  "vlSpec":{{"mark":"{mark}","encoding":{{"x":{{"field":"Genre","type":"nominal"}},
                  "y":{{"field":"Worldwide Gross","type":"quantitative","aggregate":"sum"}}}}}}}}]}}"#
        )
    }

    fn case(id: &str, query: &str, mode: Mode, group: Option<&str>) -> QueryCase {
        QueryCase {
            case_id: id.into(),
            dataset_id: "movies".into(),
            query: query.into(),
            mode,
            sequence_group: group.map(str::to_string),
            ambiguity_candidates: None,
        }
    }

    #[test]
    fn broken_chain_is_recorded_not_aborted() {
        let mut reg = DatasetRegistry::new();
        let ds = reg.insert(ingest_bytes("movies", "movies.csv", CSV.as_bytes(), Format::Csv).unwrap());
        let probe = Pipeline::new(
            Client::new(Arc::new(MockProvider::default()), RetryPolicy::default()),
            PipelineConfig { repair_rounds: 0, ..PipelineConfig::default() },
        );
        let sub = crate::dataset::subset(&ds, 42);
        let digest = |q: &str| {
            let req = QueryRequest { subset: &sub, query: q, mode: Mode::Initial, previous: None, grounding: q };
            prompt_digest(&probe.prompt_text(&req).unwrap())
        };
        let mut fx = MockFixtures::new();
        fx.insert(digest("gross by genre"), vec![Scripted::Error(ScriptedError::Malformed)]);
        fx.insert(digest("sum gross by genre"), vec![Scripted::Reply(reply("bar"))]);
        let pipeline = Pipeline::new(
            Client::new(Arc::new(MockProvider::new(fx)), RetryPolicy { max_retries: 0, base_delay: Duration::ZERO }),
            probe.config.clone(),
        );
        let corpus = vec![
            case("1", "gross by genre", Mode::Initial, Some("g")),
            case("2", "as a line", Mode::FollowUp, Some("g")),
            case("3", "sum gross by genre", Mode::Initial, None),
        ];
        let report = run_corpus(&corpus, &reg, &pipeline, RunOptions { seed: 42, concurrency: Some(2) }).unwrap();
        let statuses: Vec<_> = report.records.iter().map(|r| r.status).collect();
        assert_eq!(statuses, vec![RecordStatus::Failed, RecordStatus::BrokenChain, RecordStatus::Specified]);
        assert!(report.records[1].note.as_deref().unwrap().starts_with("BrokenChain"));
        assert!(report.records[2].latency_seconds > 0.0);

        assert!(matches!(run_corpus(&[], &reg, &pipeline, RunOptions::default()), Err(EvalError::EmptyCorpus)));
        let mut unknown = case("9", "q", Mode::Initial, None);
        unknown.dataset_id = "nope".into();
        assert!(matches!(
            run_corpus(&[unknown], &reg, &pipeline, RunOptions::default()),
            Err(EvalError::UnknownDataset { .. })
        ));
        assert!(matches!(
            run_corpus(&[case("1", "q", Mode::FollowUp, None)], &reg, &pipeline, RunOptions::default()),
            Err(EvalError::InvalidCase { .. })
        ));
    }

    fn arb_labels() -> impl Strategy<Value = Vec<(u8, Label, u32)>> {
        prop::collection::vec(
            (0u8..3, prop_oneof![Just(Label::Accurate), Just(Label::Inaccurate), Just(Label::NoOutput)], 1u32..100_000),
            1..60,
        )
    }

    fn build(rows: &[(u8, Label, u32)]) -> RunReport {
        RunReport {
            run_id: "r".into(),
            seed: 0,
            records: rows
                .iter()
                .enumerate()
                .map(|(i, (d, _, ms))| record(&format!("c{i}"), &format!("d{d}"), *ms as f64 / 1000.0))
                .collect(),
            mean_latency_seconds: 0.0,
            reconciliation: rows
                .iter()
                .enumerate()
                .map(|(i, (_, l, _))| Reconciled {
                    case_id: format!("c{i}"),
                    annotator_labels: BTreeMap::new(),
                    final_label: *l,
                    tiebreaker_used: false,
                })
                .collect(),
            metrics: None,
        }
    }

    proptest! {
        #[test]
        fn score_ignores_record_order(rows in arb_labels(), seed in any::<u64>()) {
            let a = score(&build(&rows)).unwrap();
            let mut shuffled = build(&rows);
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.records.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            shuffled.reconciliation.reverse();
            let b = score(&shuffled).unwrap();
            prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
            prop_assert_eq!(&a.per_dataset_accuracy, &b.per_dataset_accuracy);
            prop_assert_eq!(&a.counts, &b.counts);
            prop_assert!((a.mean_latency_seconds - b.mean_latency_seconds).abs() < 1e-9);
        }

        #[test]
        fn per_dataset_accuracy_recomposes(rows in arb_labels()) {
            let m = score(&build(&rows)).unwrap();
            let total: u64 = m.per_dataset_accuracy.values().map(|a| a.total).sum();
            let accurate: u64 = m.per_dataset_accuracy.values().map(|a| a.accurate).sum();
            prop_assert_eq!(total, rows.len() as u64);
            prop_assert_eq!(accurate, m.overall_accuracy.accurate);
            // Weighted mean of per-dataset ratios equals the overall ratio.
            let weighted: f64 = m.per_dataset_accuracy.values().map(|a| a.ratio() * a.total as f64).sum::<f64>() / total as f64;
            prop_assert!((weighted - m.overall_accuracy.ratio()).abs() < 1e-12);
            // Mean latency against a direct recomputation in integer milliseconds.
            let ms: u64 = rows.iter().map(|r| r.2 as u64).sum();
            prop_assert!((m.mean_latency_seconds - ms as f64 / 1000.0 / rows.len() as f64).abs() < 1e-9);
        }

        #[test]
        fn percent_truncates_exact_ratio(accurate in 0u64..10_000, extra in 0u64..10_000) {
            let total = accurate + extra + 1;
            let p = percent_hundredths(accurate, total);
            // p/10000 <= accurate/total < (p+1)/10000, by cross-multiplication.
            prop_assert!(p * total <= accurate * 10_000);
            prop_assert!(accurate * 10_000 < (p + 1) * total);
        }
    }
}
