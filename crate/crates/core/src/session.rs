//! Multi-turn conversations over one dataset, with JSON persistence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::dataset::{subset, DataSubset, Dataset};
use crate::pipeline::{Pipeline, QueryRequest, Turn};
use crate::prompt::{Mode, PromptError};
use crate::response::AnalyticSpecification;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("follow-up requested but the session has no successful specification yet")]
    NoPriorSpecification,
    #[error("session belongs to dataset {expected}, got {actual}")]
    DatasetMismatch { expected: String, actual: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset_id: String,
    pub subset_seed: u64,
    /// Fixed for the session so every turn sees the same sample rows.
    pub subset: DataSubset,
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn new(dataset: &Dataset, seed: u64) -> Self {
        Session {
            id: Uuid::new_v4().to_string(),
            dataset_id: dataset.id.clone(),
            subset_seed: seed,
            subset: subset(dataset, seed),
            turns: Vec::new(),
        }
    }

    /// Specification of the most recent successful turn.
    pub fn latest_specification(&self) -> Option<&AnalyticSpecification> {
        self.turns.iter().rev().find_map(|t| t.specification.as_ref())
    }

    /// Queries a follow-up may draw phrases from: everything since the most
    /// recent initial turn, then the new query.
    fn grounding(&self, query: &str) -> String {
        let start = self.turns.iter().rposition(|t| t.mode == Mode::Initial).unwrap_or(0);
        self.turns[start..]
            .iter()
            .map(|t| t.query.as_str())
            .chain(std::iter::once(query))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Runs one query and appends the resulting turn. Provider and response
    /// failures are recorded in the turn rather than returned.
    pub fn ask(
        &mut self,
        pipeline: &Pipeline,
        dataset: &Dataset,
        query: &str,
        mode: Mode,
    ) -> Result<&Turn, SessionError> {
        if dataset.id != self.dataset_id {
            return Err(SessionError::DatasetMismatch {
                expected: self.dataset_id.clone(),
                actual: dataset.id.clone(),
            });
        }
        if query.trim().is_empty() {
            return Err(SessionError::EmptyQuery);
        }
        let (previous, grounding) = match mode {
            Mode::Initial => (None, query.to_string()),
            Mode::FollowUp => {
                (Some(self.latest_specification().ok_or(SessionError::NoPriorSpecification)?), self.grounding(query))
            }
        };
        let req = QueryRequest { subset: &self.subset, query, mode, previous, grounding: &grounding };
        let turn = pipeline.run(dataset, &req)?;
        self.turns.push(turn);
        Ok(self.turns.last().expect("just pushed"))
    }
}

/// Sessions stored as one JSON file each, written via temp file and rename.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| SessionError::Storage(format!("{}: {e}", dir.display())))?;
        Ok(SessionStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, id: &str) -> Result<PathBuf, SessionError> {
        if Uuid::parse_str(id).is_err() {
            return Err(SessionError::NotFound(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.json")))
    }

    pub fn save(&self, session: &Session) -> Result<(), SessionError> {
        let path = self.path_for(&session.id)?;
        let tmp = self.dir.join(format!(".{}.json.tmp", session.id));
        let body = serde_json::to_vec_pretty(session).map_err(|e| SessionError::Storage(e.to_string()))?;
        std::fs::write(&tmp, body).map_err(|e| SessionError::Storage(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, &path).map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))
    }

    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        let path = self.path_for(id)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(SessionError::NotFound(id.to_string())),
            Err(e) => return Err(SessionError::Storage(format!("{}: {e}", path.display()))),
        };
        serde_json::from_str(&text).map_err(|e| SessionError::Storage(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_bytes, Format};
    use crate::llm::{prompt_digest, Client, MockFixtures, MockProvider, RetryPolicy, Scripted};
    use crate::pipeline::PipelineConfig;
    use std::sync::Arc;
    use std::time::Duration;

    const CSV: &str = "Title,Genre,Worldwide Gross\nA,Drama,10\nB,Comedy,20\nC,Drama,30\n";

    fn dataset() -> Dataset {
        ingest_bytes("movies", "movies.csv", CSV.as_bytes(), Format::Csv).unwrap()
    }

    fn reply(mark: &str) -> String {
        serde_json::json!({
            "attributeMap": {
                "Genre": {"queryPhrase": "genre"},
                "Worldwide Gross": {"queryPhrase": "gross"}
            },
            "taskMap": {"Derived Value": [{"attributes": ["Worldwide Gross"], "operator": "sum"}]},
            "visList": [{
                "attributes": ["Genre", "Worldwide Gross"],
                "tasks": ["Derived Value"],
                "vlSpec": {
                    "mark": mark,
                    "encoding": {
                        "x": {"field": "Genre", "type": "nominal"},
                        "y": {"field": "Worldwide Gross", "type": "quantitative", "aggregate": "sum"}
                    }
                }
            }]
        })
        .to_string()
    }

    fn pipeline(fixtures: MockFixtures) -> Pipeline {
        let client = Client::new(
            Arc::new(MockProvider::new(fixtures)),
            RetryPolicy { max_retries: 2, base_delay: Duration::from_millis(1) },
        );
        Pipeline::new(client, PipelineConfig::default())
    }

    fn digest_for(p: &Pipeline, s: &Session, query: &str, mode: Mode, prev: Option<&AnalyticSpecification>) -> String {
        let req = QueryRequest { subset: &s.subset, query, mode, previous: prev, grounding: query };
        prompt_digest(&p.prompt_text(&req).unwrap())
    }

    #[test]
    fn follow_up_without_prior_spec_is_rejected() {
        let ds = dataset();
        let mut s = Session::new(&ds, 42);
        let p = pipeline(MockFixtures::new());
        assert!(matches!(
            s.ask(&p, &ds, "now make it a line", Mode::FollowUp),
            Err(SessionError::NoPriorSpecification)
        ));
        assert!(matches!(s.ask(&p, &ds, "  ", Mode::Initial), Err(SessionError::EmptyQuery)));
        assert!(s.turns.is_empty());
    }

    #[test]
    fn provider_failure_is_recorded_in_the_turn() {
        let ds = dataset();
        let mut s = Session::new(&ds, 42);
        let p = pipeline(MockFixtures::new());
        let turn = s.ask(&p, &ds, "Show gross by genre", Mode::Initial).unwrap();
        assert!(!turn.succeeded());
        assert_eq!(turn.error.as_ref().unwrap().code, "FixtureMiss");
        assert!(turn.report.is_none());
    }

    #[test]
    fn follow_up_uses_previous_spec_and_persists() {
        let ds = dataset();
        let mut s = Session::new(&ds, 42);
        let probe = pipeline(MockFixtures::new());
        let q1 = "Show gross by genre";
        let d1 = digest_for(&probe, &s, q1, Mode::Initial, None);
        let first = crate::response::parse(&reply("bar")).unwrap();
        let q2 = "make it a line chart";
        let d2 = digest_for(&probe, &s, q2, Mode::FollowUp, Some(&first));

        let mut fx = MockFixtures::new();
        fx.insert(d1, vec![Scripted::Reply(reply("bar"))]);
        fx.insert(d2, vec![Scripted::Reply(reply("line"))]);
        let p = pipeline(fx);

        assert!(s.ask(&p, &ds, q1, Mode::Initial).unwrap().succeeded());
        let t2 = s.ask(&p, &ds, q2, Mode::FollowUp).unwrap();
        assert!(t2.succeeded(), "{:?}", t2.error);
        assert_eq!(s.latest_specification().unwrap().vis_list[0].mark, "line");

        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.save(&s).unwrap();
        assert_eq!(store.load(&s.id).unwrap(), s);
        assert!(matches!(store.load(&Uuid::new_v4().to_string()), Err(SessionError::NotFound(_))));
        assert!(matches!(store.load("../etc/passwd"), Err(SessionError::NotFound(_))));
    }

    #[test]
    fn invalid_reply_is_repaired_once() {
        let ds = dataset();
        let mut s = Session::new(&ds, 7);
        let probe = pipeline(MockFixtures::new());
        let q = "Show gross by genre";
        let d = digest_for(&probe, &s, q, Mode::Initial, None);
        let bad = reply("bar").replace("\"field\":\"Genre\"", "\"field\":\"Studio\"");
        let req = QueryRequest { subset: &s.subset, query: q, mode: Mode::Initial, previous: None, grounding: q };
        let original = probe.prompt_text(&req).unwrap();
        let (_, report) = crate::response::evaluate_reply(&bad, &ds, q);
        assert!(report.is_invalid());
        let repair_digest = prompt_digest(&crate::response::repair_prompt(&original, &report));

        let mut fx = MockFixtures::new();
        fx.insert(d, vec![Scripted::Reply(bad)]);
        fx.insert(repair_digest, vec![Scripted::Reply(reply("bar"))]);
        let p = pipeline(fx);
        let turn = s.ask(&p, &ds, q, Mode::Initial).unwrap();
        assert!(turn.succeeded(), "{:?}", turn.error);
        assert_eq!(turn.attempts.len(), 2);
        assert!(turn.attempts[0].report.is_invalid());
    }
}
