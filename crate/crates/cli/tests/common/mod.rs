#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::{Arc, Mutex};

use vizprompt_core::dataset::DatasetRegistry;
use vizprompt_core::evaluation::{load_corpus, QueryCase};
use vizprompt_core::llm::{prompt_digest, Client, LlmError, MockFixtures, Provider, RetryPolicy, Scripted};
use vizprompt_core::pipeline::{Pipeline, PipelineConfig};
use vizprompt_core::prompt::Mode;
use vizprompt_core::session::Session;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap()
}

pub fn vizprompt(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_vizprompt"));
    cmd.args(args)
        .env_remove("VIZPROMPT_MOCK_FIXTURES")
        .env_remove("VIZPROMPT_CONFIG")
        .env_remove("VIZPROMPT_STATE_DIR")
        .env_remove("VIZPROMPT_DATA_DIR")
        .env_remove("OPENAI_API_KEY");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Hands out queued replies in order and records which prompt got which.
#[derive(Default)]
struct Recorder {
    queue: Mutex<VecDeque<String>>,
    seen: Mutex<MockFixtures>,
}

impl Provider for Recorder {
    fn id(&self) -> &str {
        "recorder"
    }

    fn send(&self, prompt: &str) -> Result<String, LlmError> {
        let reply = self.queue.lock().unwrap().pop_front().expect("case asked for more replies than scripted");
        self.seen.lock().unwrap().entry(prompt_digest(prompt)).or_default().push(Scripted::Reply(reply.clone()));
        Ok(reply)
    }
}

/// Digest-keyed mock fixtures for the eval corpus, derived by replaying each
/// chain against the per-case replies in `fixtures/eval/replies.json`.
pub fn build_eval_mock(seed: u64) -> MockFixtures {
    let root = fixtures();
    let corpus: Vec<QueryCase> = load_corpus(root.join("eval/corpus.jsonl")).unwrap();
    let replies: BTreeMap<String, Vec<String>> = serde_json::from_str(&read("eval/replies.json")).unwrap();
    let registry = DatasetRegistry::from_dir(root.join("datasets")).unwrap();
    let recorder = Arc::new(Recorder::default());
    let pipeline = Pipeline::new(
        Client::new(Arc::clone(&recorder) as Arc<dyn Provider>, RetryPolicy::default()),
        PipelineConfig::default(),
    );

    let mut chains: Vec<(Option<String>, Vec<&QueryCase>)> = Vec::new();
    for case in &corpus {
        match chains.iter_mut().find(|(g, _)| g.is_some() && *g == case.sequence_group) {
            Some((_, cases)) => cases.push(case),
            None => chains.push((case.sequence_group.clone(), vec![case])),
        }
    }
    for (_, cases) in chains {
        let dataset = registry.get(&cases[0].dataset_id).unwrap();
        let mut session = Session::new(&dataset, seed);
        let mut ok = true;
        for case in cases {
            let scripted = replies.get(&case.case_id).cloned().unwrap_or_default();
            if case.mode == Mode::FollowUp && !ok {
                assert!(scripted.is_empty(), "{}: replies scripted for a broken chain", case.case_id);
                continue;
            }
            *recorder.queue.lock().unwrap() = scripted.into();
            ok = session.ask(&pipeline, &dataset, &case.query, case.mode).unwrap().succeeded();
            assert!(recorder.queue.lock().unwrap().is_empty(), "{}: unused replies", case.case_id);
        }
    }
    let seen = recorder.seen.lock().unwrap().clone();
    for (digest, script) in &seen {
        assert_eq!(script.len(), 1, "two cases share prompt {digest}");
    }
    seen
}

pub fn mock_json(fixtures: &MockFixtures) -> String {
    serde_json::to_string_pretty(fixtures).unwrap() + "\n"
}
