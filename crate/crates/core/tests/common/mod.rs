#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use vizprompt_core::dataset::{Dataset, DatasetRegistry};
use vizprompt_core::llm::{Client, MockFixtures, MockProvider, RetryPolicy};
use vizprompt_core::pipeline::{Pipeline, PipelineConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn read(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap()
}

pub fn registry() -> DatasetRegistry {
    DatasetRegistry::from_dir(fixtures().join("datasets")).unwrap()
}

pub fn dataset(id: &str) -> Arc<Dataset> {
    registry().get(id).unwrap()
}

pub fn pipeline(fixtures: MockFixtures, config: PipelineConfig) -> Pipeline {
    let client = Client::new(
        Arc::new(MockProvider::new(fixtures)),
        RetryPolicy { max_retries: 2, base_delay: Duration::from_millis(1) },
    );
    Pipeline::new(client, config)
}
