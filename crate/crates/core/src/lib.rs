//! NL2VIS pipeline engine: dataset ingestion, prompt assembly, model calls,
//! response validation, sessions and corpus evaluation.

pub mod dataset;
pub mod evaluation;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod response;
pub mod session;
pub mod taxonomy;
