mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{build_eval_mock, fixtures, mock_json, read, stderr, stdout, vizprompt};
use serde_json::Value;

fn data_dir() -> String {
    fixtures().join("datasets").display().to_string()
}

fn digest_of(args: &[&str]) -> String {
    let d = data_dir();
    let mut full = vec!["--data-dir", &d, "prompt", "--digest"];
    full.extend_from_slice(args);
    let out = vizprompt(&full, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    stdout(&out).trim().to_string()
}

fn write_mock(dir: &Path, entries: &[(&str, Value)]) -> std::path::PathBuf {
    let map: BTreeMap<&str, &Value> = entries.iter().map(|(k, v)| (*k, v)).collect();
    let path = dir.join("mock.json");
    std::fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
    path
}

fn first_reply(case_id: &str) -> String {
    let replies: BTreeMap<String, Vec<String>> = serde_json::from_str(&read("eval/replies.json")).unwrap();
    replies[case_id][0].clone()
}

#[test]
fn prompt_matches_golden_bytes() {
    let d = data_dir();
    let out = vizprompt(&["--data-dir", &d, "prompt", "movies", "Show gross by genre", "--seed", "42"], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), read("golden/movies.v5.prompt.txt"));
}

#[test]
fn prompt_follow_up_matches_golden_bytes() {
    let cases: Value = serde_json::from_str(&read("golden/cases.json")).unwrap();
    let query = cases["datasets"]["cars"]["ambiguous"].as_str().unwrap();
    let prev = fixtures().join("specs/cars.prev.json").display().to_string();
    let d = data_dir();
    let out =
        vizprompt(&["--data-dir", &d, "prompt", "cars", query, "--follow-up", "--prev", &prev, "--no-json-only"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), read("golden/cars.ambiguous.followup.prose.prompt.txt"));
}

#[test]
fn prompt_needs_no_provider() {
    // A config pointing at an unreachable endpoint with no key must not matter.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[provider]\nendpoint_url = \"http://127.0.0.1:9/v1\"\n").unwrap();
    let c = config.display().to_string();
    let d = data_dir();
    let out = vizprompt(&["--config", &c, "--data-dir", &d, "prompt", "cars", "Show mpg by origin"], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    let d = data_dir();
    assert_eq!(vizprompt(&["--data-dir", &d, "prompt", "nope", "q"], &[]).status.code(), Some(2));
    assert_eq!(vizprompt(&["--data-dir", &d, "prompt", "movies", "q", "--follow-up"], &[]).status.code(), Some(2));
    assert_eq!(vizprompt(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(vizprompt(&["--version"], &[]).status.code(), Some(0));
}

#[test]
fn ingest_registers_and_prints_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let src = fixtures().join("datasets/cars.csv").display().to_string();
    let out = vizprompt(&["--data-dir", &d, "ingest", &src], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let schema: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(schema["id"], "cars");
    assert_eq!(schema["row_count"], 7);
    let cyl = schema["attributes"].as_array().unwrap().iter().find(|a| a["name"] == "Cylinders").unwrap();
    assert_eq!(cyl["datatype"], "ordinal");
    assert!(dir.path().join("cars.csv").is_file());
    assert!(dir.path().join("cars.types.toml").is_file());

    let out = vizprompt(&["--data-dir", &d, "prompt", "cars", "Show mpg by origin", "--digest"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn query_happy_path_prints_specification() {
    let digest = digest_of(&["movies", "Show gross by genre"]);
    let dir = tempfile::tempdir().unwrap();
    let mock = write_mock(dir.path(), &[(&digest, serde_json::json!([{ "reply": first_reply("movies-01") }]))]);
    let d = data_dir();
    let out =
        vizprompt(&["--data-dir", &d, "query", "movies", "Show gross by genre"], &[("VIZPROMPT_MOCK_FIXTURES", &mock)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(!body["specification"]["visList"].as_array().unwrap().is_empty());
    assert_ne!(body["report"]["verdict"], "Invalid");
    assert!(body["latency_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn query_malformed_without_repair_exits_1() {
    let digest = digest_of(&["movies", "Show gross by genre"]);
    let dir = tempfile::tempdir().unwrap();
    let mock = write_mock(dir.path(), &[(&digest, serde_json::json!([{ "reply": "{\"attributeMap\": {\"Genre\"" }]))]);
    let d = data_dir();
    let out = vizprompt(
        &["--data-dir", &d, "query", "movies", "Show gross by genre", "--no-repair"],
        &[("VIZPROMPT_MOCK_FIXTURES", &mock)],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).is_empty());
    assert!(stderr(&out).contains("MalformedJson"), "{}", stderr(&out));
}

#[test]
fn query_provider_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mock = write_mock(dir.path(), &[]);
    let d = data_dir();
    let out =
        vizprompt(&["--data-dir", &d, "query", "movies", "Show gross by genre"], &[("VIZPROMPT_MOCK_FIXTURES", &mock)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("FixtureMiss"), "{}", stderr(&out));
}

#[test]
fn query_writes_emitted_prompt() {
    let digest = digest_of(&["movies", "Show gross by genre"]);
    let dir = tempfile::tempdir().unwrap();
    let mock = write_mock(dir.path(), &[(&digest, serde_json::json!([{ "reply": first_reply("movies-01") }]))]);
    let emitted = dir.path().join("prompt.txt");
    let (d, e) = (data_dir(), emitted.display().to_string());
    let out = vizprompt(
        &["--data-dir", &d, "query", "movies", "Show gross by genre", "--emit-prompt", &e],
        &[("VIZPROMPT_MOCK_FIXTURES", &mock)],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(emitted).unwrap(), read("golden/movies.v5.prompt.txt"));
}

/// `UPDATE_GOLDEN=1` rewrites `fixtures/eval/mock.json`.
#[test]
fn eval_mock_fixture_is_current() {
    let built = mock_json(&build_eval_mock(42));
    let path = fixtures().join("eval/mock.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &built).unwrap();
    }
    assert_eq!(std::fs::read_to_string(path).unwrap(), built, "run with UPDATE_GOLDEN=1");
}

#[test]
fn eval_run_and_score_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let scored = dir.path().join("scored.json");
    let (d, r, s) = (data_dir(), report.display().to_string(), scored.display().to_string());
    let corpus = fixtures().join("eval/corpus.jsonl").display().to_string();
    let ann = fixtures().join("eval/annotations.jsonl").display().to_string();
    let mock = fixtures().join("eval/mock.json");

    let out = vizprompt(
        &["--data-dir", &d, "eval", "run", &corpus, "--out", &r, "--concurrency", "4"],
        &[("VIZPROMPT_MOCK_FIXTURES", &mock)],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let run: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let records = run["records"].as_array().unwrap();
    assert_eq!(records.len(), 20);
    assert!(records.iter().all(|r| r["latency_seconds"].as_f64().is_some()));
    let failed: Vec<&str> =
        records.iter().filter(|r| r["status"] != "Specified").map(|r| r["case_id"].as_str().unwrap()).collect();
    assert_eq!(failed, ["store-06"]);

    let out = vizprompt(&["eval", "score", &r, &ann, "--tiebreaker", "annotator-c", "--out", &s], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(metrics["overall_accuracy"]["accurate"], 19);
    assert_eq!(metrics["counts"]["superstore"]["no_output"], 1);
    assert_eq!(metrics["overall_accuracy"]["total"], 20);
    assert!(stderr(&out).contains("tiebreaker decided: store-04"));
    let full: Value = serde_json::from_str(&std::fs::read_to_string(&scored).unwrap()).unwrap();
    let store04 = full["reconciliation"].as_array().unwrap().iter().find(|r| r["case_id"] == "store-04").unwrap();
    assert_eq!(store04["tiebreaker_used"], true);
    assert_eq!(store04["final_label"], "Accurate");
    assert!(full["metrics"].is_object());

    let out = vizprompt(&["eval", "score", &r, &ann, "--tiebreaker", "nobody"], &[]);
    assert_eq!(out.status.code(), Some(2));
}
