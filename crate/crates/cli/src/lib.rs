//! Command-line front end and HTTP service for the vizprompt pipeline.

pub mod config;
pub mod server;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vizprompt_core::dataset::{load_registered, subset, Dataset, DatasetRegistry, Format};
use vizprompt_core::evaluation::{
    load_annotations, load_corpus, reconcile, run_corpus, score, Metrics, RecordStatus, RunOptions, RunReport,
};
use vizprompt_core::llm::prompt_digest;
use vizprompt_core::pipeline::{Pipeline, QueryRequest, TurnErrorKind};
use vizprompt_core::prompt::{estimate_tokens, Mode};
use vizprompt_core::response::{parse, AnalyticSpecification};

use crate::config::ServiceConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PROVIDER: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "vizprompt", version, about = "Natural language to visualization specifications")]
pub struct Cli {
    /// Service config file (TOML).
    #[arg(long, global = true, env = "VIZPROMPT_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `state_dir` from the config.
    #[arg(long, global = true, env = "VIZPROMPT_STATE_DIR")]
    state_dir: Option<PathBuf>,
    /// Directory holding registered datasets. Defaults to `<state_dir>/datasets`.
    #[arg(long, global = true, env = "VIZPROMPT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a CSV or JSON-records file and print its inferred schema.
    Ingest {
        file: PathBuf,
        /// Dataset id; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Print the rendered prompt. Never contacts the provider.
    Prompt {
        #[command(flatten)]
        q: QueryArgs,
        /// Print the SHA-256 digest of the prompt instead of the text.
        #[arg(long)]
        digest: bool,
    },
    /// Run one query through the full pipeline.
    Query {
        #[command(flatten)]
        q: QueryArgs,
        /// Skip the corrective round-trip for invalid replies.
        #[arg(long)]
        no_repair: bool,
        /// Also write the rendered prompt to this file.
        #[arg(long, value_name = "PATH")]
        emit_prompt: Option<PathBuf>,
    },
    /// Benchmark corpus runs and scoring.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Start the HTTP service.
    Serve {
        /// Overrides `listen_address` from the config.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Replay a JSONL corpus and write a run report.
    Run {
        corpus: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Chains in flight at once.
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Reconcile annotations against a run report and compute metrics.
    Score {
        report: PathBuf,
        annotations: PathBuf,
        /// Annotator whose label settles disagreements.
        #[arg(long)]
        tiebreaker: String,
        /// Write the report with reconciliation and metrics attached.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct QueryArgs {
    dataset: String,
    query: String,
    #[arg(long, requires = "prev")]
    follow_up: bool,
    /// Previous specification (JSON) for follow-ups.
    #[arg(long, requires = "follow_up")]
    prev: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the sentence asking for JSON only, so the model may explain itself.
    #[arg(long)]
    no_json_only: bool,
    #[arg(long)]
    token_budget: Option<usize>,
}

/// A failed command with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_USAGE, error: error.into() }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        usage(error)
    }
}

type CmdResult = Result<u8, Failure>;

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            e.print().ok();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

struct Env {
    config: ServiceConfig,
    data_dir: PathBuf,
}

fn context(cli: &Cli) -> Result<Env, Failure> {
    let mut config = ServiceConfig::load_or_default(cli.config.as_deref())?;
    if let Some(dir) = &cli.state_dir {
        config.state_dir = dir.clone();
    }
    let data_dir = cli.data_dir.clone().unwrap_or_else(|| config.datasets_dir());
    Ok(Env { config, data_dir })
}

fn dispatch(cli: Cli) -> CmdResult {
    let ctx = context(&cli)?;
    match cli.command {
        Command::Ingest { file, id } => ingest(&ctx, &file, id),
        Command::Prompt { q, digest } => prompt(&ctx, &q, digest),
        Command::Query { q, no_repair, emit_prompt } => query(&ctx, &q, no_repair, emit_prompt.as_deref()),
        Command::Eval(EvalCommand::Run { corpus, out, seed, concurrency }) => {
            eval_run(&ctx, &corpus, out.as_deref(), RunOptions { seed, concurrency })
        }
        Command::Eval(EvalCommand::Score { report, annotations, tiebreaker, out }) => {
            eval_score(&report, &annotations, &tiebreaker, out.as_deref())
        }
        Command::Serve { listen } => {
            let mut config = ctx.config;
            if let Some(l) = listen {
                config.listen_address = l;
            }
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            rt.block_on(server::serve(config))?;
            Ok(EXIT_OK)
        }
    }
}

fn schema_json(d: &Dataset) -> serde_json::Value {
    json!({
        "id": d.id,
        "row_count": d.row_count,
        "attributes": d.attributes.iter().map(|a| json!({
            "name": a.name,
            "datatype": a.datatype.vega_lite_type(),
        })).collect::<Vec<_>>(),
    })
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    writeln!(std::io::stdout().lock(), "{text}").map_err(anyhow::Error::from)?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.types.toml"))
}

fn ingest(ctx: &Env, file: &Path, id: Option<String>) -> CmdResult {
    let format = Format::from_path(file).ok_or_else(|| usage(anyhow!("unsupported file type: {}", file.display())))?;
    let ext = if format == Format::Csv { "csv" } else { "json" };
    let id = id
        .or_else(|| file.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| usage(anyhow!("cannot derive a dataset id from {}", file.display())))?;
    fs::create_dir_all(&ctx.data_dir).with_context(|| format!("creating {}", ctx.data_dir.display()))?;
    let target = ctx.data_dir.join(format!("{id}.{ext}"));
    if fs::canonicalize(file).ok() != fs::canonicalize(&target).ok() {
        fs::copy(file, &target).with_context(|| format!("copying to {}", target.display()))?;
        if sidecar(file).is_file() {
            fs::copy(sidecar(file), sidecar(&target)).context("copying datatype overrides")?;
        }
    }
    let dataset = load_registered(&target).map_err(usage)?;
    print_json(&schema_json(&dataset))?;
    Ok(EXIT_OK)
}

fn find_dataset(dir: &Path, id: &str) -> Result<Dataset, Failure> {
    let path = ["csv", "json"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| usage(anyhow!("unknown dataset `{id}` in {}", dir.display())))?;
    load_registered(&path).map_err(usage)
}

fn read_prev(path: &Path) -> Result<AnalyticSpecification, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

/// Everything needed to render or run one query.
struct Prepared {
    dataset: Dataset,
    subset: vizprompt_core::dataset::DataSubset,
    previous: Option<AnalyticSpecification>,
    mode: Mode,
}

fn prepare(ctx: &Env, q: &QueryArgs) -> Result<Prepared, Failure> {
    let dataset = find_dataset(&ctx.data_dir, &q.dataset)?;
    let seed = q.seed.unwrap_or(ctx.config.default_seed);
    let previous = q.prev.as_deref().map(read_prev).transpose()?;
    let mode = if q.follow_up { Mode::FollowUp } else { Mode::Initial };
    Ok(Prepared { subset: subset(&dataset, seed), dataset, previous, mode })
}

impl Prepared {
    fn request<'a>(&'a self, query: &'a str) -> QueryRequest<'a> {
        QueryRequest {
            subset: &self.subset,
            query,
            mode: self.mode,
            previous: self.previous.as_ref(),
            grounding: query,
        }
    }
}

fn pipeline_config(ctx: &Env, q: &QueryArgs) -> vizprompt_core::pipeline::PipelineConfig {
    let mut pc = ctx.config.pipeline.clone();
    if q.no_json_only {
        pc.json_only = false;
    }
    if let Some(b) = q.token_budget {
        pc.token_budget = b;
    }
    pc
}

fn prompt(ctx: &Env, q: &QueryArgs, digest: bool) -> CmdResult {
    let prepared = prepare(ctx, q)?;
    // The client is never called here; a disconnected mock stands in.
    let client = vizprompt_core::llm::Client::new(
        std::sync::Arc::new(vizprompt_core::llm::MockProvider::new(Default::default())),
        Default::default(),
    );
    let pipeline = Pipeline::new(client, pipeline_config(ctx, q));
    let text = pipeline.prompt_text(&prepared.request(&q.query)).map_err(usage)?;
    let mut out = std::io::stdout().lock();
    if digest {
        writeln!(out, "{}", prompt_digest(&text)).map_err(anyhow::Error::from)?;
    } else {
        out.write_all(text.as_bytes()).map_err(anyhow::Error::from)?;
    }
    eprintln!("~{} tokens", estimate_tokens(&text));
    Ok(EXIT_OK)
}

fn query(ctx: &Env, q: &QueryArgs, no_repair: bool, emit_prompt: Option<&Path>) -> CmdResult {
    let prepared = prepare(ctx, q)?;
    let mut pc = pipeline_config(ctx, q);
    if no_repair {
        pc.repair_rounds = 0;
    }
    let client = ctx.config.client().map_err(|e| Failure { code: EXIT_PROVIDER, error: e })?;
    let pipeline = Pipeline::new(client, pc);
    let req = prepared.request(&q.query);
    if let Some(path) = emit_prompt {
        let text = pipeline.prompt_text(&req).map_err(usage)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let turn = pipeline.run(&prepared.dataset, &req).map_err(usage)?;
    match &turn.error {
        None => {
            print_json(&json!({
                "specification": turn.specification,
                "report": turn.report,
                "latency_seconds": turn.latency_seconds,
            }))?;
            Ok(EXIT_OK)
        }
        Some(e) if e.kind == TurnErrorKind::Provider => {
            Err(Failure { code: EXIT_PROVIDER, error: anyhow!("{}: {}", e.code, e.message) })
        }
        Some(e) => {
            let report = serde_json::to_string_pretty(&turn.report).map_err(anyhow::Error::from)?;
            eprintln!("{report}");
            Err(Failure { code: EXIT_INVALID, error: anyhow!("{}: {}", e.code, e.message) })
        }
    }
}

fn write_or_print(out: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Failure> {
    match out {
        Some(path) => {
            let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
            fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
            Ok(())
        }
        None => print_json(value),
    }
}

fn eval_run(ctx: &Env, corpus: &Path, out: Option<&Path>, options: RunOptions) -> CmdResult {
    let cases = load_corpus(corpus).map_err(usage)?;
    let registry = DatasetRegistry::from_dir(&ctx.data_dir).map_err(usage)?;
    let client = ctx.config.client().map_err(|e| Failure { code: EXIT_PROVIDER, error: e })?;
    let pipeline = Pipeline::new(client, ctx.config.pipeline.clone());
    let report = run_corpus(&cases, &registry, &pipeline, options).map_err(usage)?;
    let count = |s: RecordStatus| report.records.iter().filter(|r| r.status == s).count();
    eprintln!(
        "{} cases: {} specified, {} failed, {} broken chain; mean latency {:.3}s",
        report.records.len(),
        count(RecordStatus::Specified),
        count(RecordStatus::Failed),
        count(RecordStatus::BrokenChain),
        report.mean_latency_seconds,
    );
    write_or_print(out, &report)?;
    Ok(EXIT_OK)
}

fn metrics_table(m: &Metrics) -> String {
    let mut s = format!("{:<16} {:>8} {:>8} {:>8} {:>9}\n", "dataset", "accurate", "total", "no-out", "accuracy");
    for (id, acc) in &m.per_dataset_accuracy {
        let no_output = m.counts.get(id).map_or(0, |c| c.no_output);
        s += &format!("{:<16} {:>8} {:>8} {:>8} {:>9}\n", id, acc.accurate, acc.total, no_output, acc.percent_string());
    }
    let all = &m.overall_accuracy;
    let no_output: u64 = m.counts.values().map(|c| c.no_output).sum();
    s += &format!(
        "{:<16} {:>8} {:>8} {:>8} {:>9}\n",
        "overall",
        all.accurate,
        all.total,
        no_output,
        all.percent_string()
    );
    s += &format!("mean latency {:.3}s", m.mean_latency_seconds);
    s
}

fn eval_score(report_path: &Path, annotations: &Path, tiebreaker: &str, out: Option<&Path>) -> CmdResult {
    let text = fs::read_to_string(report_path).with_context(|| format!("reading {}", report_path.display()))?;
    let mut report: RunReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", report_path.display()))?;
    let annotations = load_annotations(annotations).map_err(usage)?;
    report.reconciliation = reconcile(&annotations, tiebreaker).map_err(usage)?;
    let metrics = score(&report).map_err(usage)?;
    eprintln!("{}", metrics_table(&metrics));
    let tiebroken: Vec<&str> =
        report.reconciliation.iter().filter(|r| r.tiebreaker_used).map(|r| r.case_id.as_str()).collect();
    if !tiebroken.is_empty() {
        eprintln!("tiebreaker decided: {}", tiebroken.join(", "));
    }
    print_json(&metrics)?;
    if let Some(path) = out {
        report.metrics = Some(metrics);
        write_or_print(Some(path), &report)?;
    }
    Ok(EXIT_OK)
}
