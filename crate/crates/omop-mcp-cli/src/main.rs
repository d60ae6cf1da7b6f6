//! Operator entry point binding the toolkit together: run the MCP server on
//! stdio, map term files in batch, evaluate completed runs, and inspect
//! concept fixtures.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use omop_mcp::agent::{
    map_batch, AgentOptions, LiveChatEndpoint, LlmPort, MapOutcome, MappingRequest, ScriptedMock,
};
use omop_mcp::athena::{
    FixtureIndex, GatewayConfig, SystemClock, VocabularyStore, ENV_BASE_URL, ENV_FIXTURE_PATH,
};
use omop_mcp::eval::{load_eval_csv, percent, timing_summary, EvalRecord, EvalReport};
use omop_mcp::mcp::Server;
use omop_mcp::vocabulary::{Concept, MappingResult, OutcomeClass};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "omop-mcp",
    version,
    about = "OMOP concept mapping toolkit: MCP server, batch mapper, evaluation reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MCP server on stdin/stdout until the host closes the pipe
    Serve(BackendArgs),
    /// Map a file of source terms and write one result row per term
    Map(MapArgs),
    /// Compute evaluation statistics from a results CSV or a paired-score CSV
    Eval(EvalArgs),
    /// Validate or summarize a concept fixture file
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// Concept fixture (newline-delimited JSON) backing the vocabulary
    #[arg(long, value_name = "PATH", conflicts_with = "athena_url")]
    fixture: Option<PathBuf>,
    /// Base URL of a live Athena-compatible concept service
    #[arg(long, value_name = "URL")]
    athena_url: Option<String>,
}

#[derive(Args)]
struct MapArgs {
    /// UTF-8 terms file, one term per line (`term`, optionally
    /// `term<TAB>table` or `term<TAB>table<TAB>field`)
    terms: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Scripted model transcript (JSON list of expect/respond steps)
    #[arg(long, value_name = "PATH", conflicts_with = "llm_model")]
    mock: Option<PathBuf>,
    /// Live model name; endpoint and key come from LLM_API_BASE / LLM_API_KEY
    #[arg(long, value_name = "NAME")]
    llm_model: Option<String>,
    /// Ablation: answer from model memory without vocabulary tools
    #[arg(long)]
    no_tools: bool,
    /// Worker threads for the batch
    #[arg(long, value_name = "N", default_value_t = 1)]
    parallelism: usize,
    /// Write rows here instead of stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Row format
    #[arg(long, value_enum, default_value_t = RowFormat::Jsonl)]
    format: RowFormat,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV input: either `term,outcome,relevance,elapsed_seconds` or
    /// `term,system_score,human_score`
    input: PathBuf,
    /// Write the JSON report here; the text summary always goes to stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[command(subcommand)]
    action: FixtureAction,
}

#[derive(Subcommand)]
enum FixtureAction {
    /// Check every line parses as a concept and ids are unique
    Validate { path: PathBuf },
    /// Count concepts per domain and per vocabulary
    Stats { path: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RowFormat {
    Jsonl,
    Csv,
}

/// Failure that already knows its exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError { code: EXIT_RUNTIME, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => cmd_serve(&args),
        Command::Map(args) => cmd_map(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Fixture(args) => match args.action {
            FixtureAction::Validate { path } => cmd_fixture_validate(&path),
            FixtureAction::Stats { path } => cmd_fixture_stats(&path),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {}", error.message);
            ExitCode::from(error.code)
        }
    }
}

/// Backend precedence: --fixture, then --athena-url, then the environment
/// (OMOP_MCP_FIXTURE, then ATHENA_BASE_URL).
fn resolve_store(args: &BackendArgs) -> Result<VocabularyStore, CliError> {
    let config = GatewayConfig::from_env().map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(path) = &args.fixture {
        let index = FixtureIndex::from_ndjson_path(path)
            .map_err(|e| CliError::usage(format!("fixture {}: {e}", path.display())))?;
        return Ok(VocabularyStore::fixture_with(index, config, SystemClock::shared()));
    }
    if let Some(url) = &args.athena_url {
        return VocabularyStore::live(url.clone(), config)
            .map_err(|e| CliError::usage(e.to_string()));
    }
    VocabularyStore::from_env().map_err(|e| {
        CliError::usage(format!(
            "{e}; pass --fixture or --athena-url, or set {ENV_FIXTURE_PATH} or {ENV_BASE_URL}"
        ))
    })
}

fn resolve_llm(mock: Option<&Path>, model: Option<&str>) -> Result<Box<dyn LlmPort>, CliError> {
    if let Some(path) = mock {
        let scripted =
            ScriptedMock::from_json_path(path).map_err(|e| CliError::usage(e.to_string()))?;
        return Ok(Box::new(scripted));
    }
    // A model name on the command line or LLM_MODEL in the environment both
    // point at the live endpoint; its constructor reports what is missing.
    let live = LiveChatEndpoint::from_env(model).map_err(|e| {
        CliError::usage(format!("{e}; pass --mock for a scripted run, or configure the endpoint"))
    })?;
    Ok(Box::new(live))
}

fn cmd_serve(args: &BackendArgs) -> Result<(), CliError> {
    let store = resolve_store(args)?;
    let server = Server::new(&store);
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    server
        .serve(stdin.lock(), stdout.lock())
        .map_err(|e| CliError::runtime(format!("transport: {e}")))
}

/// One output row. Success rows embed the full verified mapping; failure
/// rows carry the failure kind and its explanation; rows for terms whose
/// mapping could not run at all (model or upstream outage) carry `error`.
#[derive(Serialize)]
#[serde(untagged)]
enum MapRow<'a> {
    Mapped {
        term: &'a str,
        outcome: &'static str,
        mapping: &'a MappingResult,
        attempts: u32,
        elapsed_seconds: f64,
    },
    Failed {
        term: &'a str,
        outcome: &'static str,
        detail: &'a str,
        attempts: u32,
        elapsed_seconds: f64,
    },
    Errored {
        term: &'a str,
        error: String,
    },
}

fn cmd_map(args: &MapArgs) -> Result<(), CliError> {
    if args.parallelism == 0 {
        return Err(CliError::usage("--parallelism must be at least 1"));
    }
    let store = resolve_store(&args.backend)?;
    let llm = resolve_llm(args.mock.as_deref(), args.llm_model.as_deref())?;
    let options = {
        let mut options = AgentOptions::from_env().map_err(|e| CliError::usage(e.to_string()))?;
        options.tool_access = !args.no_tools;
        options
    };

    let raw = std::fs::read_to_string(&args.terms)
        .map_err(|e| CliError::usage(format!("terms file {}: {e}", args.terms.display())))?;
    let requests = parse_terms(&raw);

    let mut sink: BufWriter<Box<dyn Write>> = BufWriter::new(match &args.out {
        Some(path) => Box::new(
            File::create(path)
                .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?,
        ),
        None => Box::new(std::io::stdout()),
    });

    if requests.is_empty() {
        if args.format == RowFormat::Csv {
            write_csv_header(&mut sink)?;
        }
        sink.flush().map_err(write_error)?;
        eprintln!("retrieval success not applicable (0 terms)");
        return Ok(());
    }

    let results = map_batch(&requests, llm.as_ref(), &store, &options, args.parallelism);

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut infrastructure_errors = 0usize;
    if args.format == RowFormat::Csv {
        write_csv_header(&mut sink)?;
    }
    for (request, result) in &results {
        let row = match result {
            Ok(MapOutcome::Mapped(mapping)) => MapRow::Mapped {
                term: &request.source_term,
                outcome: OutcomeClass::Success.token(),
                mapping: &mapping.verified.result,
                attempts: mapping.attempts,
                elapsed_seconds: mapping.elapsed_seconds,
            },
            Ok(MapOutcome::Failed(failure)) => MapRow::Failed {
                term: &request.source_term,
                outcome: OutcomeClass::Failure(failure.kind).token(),
                detail: &failure.detail,
                attempts: failure.attempts,
                elapsed_seconds: failure.elapsed_seconds,
            },
            Err(error) => MapRow::Errored { term: &request.source_term, error: error.to_string() },
        };
        match args.format {
            RowFormat::Jsonl => {
                serde_json::to_writer(&mut sink, &row)
                    .map_err(|e| CliError::runtime(format!("cannot serialize result row: {e}")))?;
                sink.write_all(b"\n").map_err(write_error)?;
            }
            RowFormat::Csv => write_csv_row(&mut sink, &row)?,
        }
        match result {
            Ok(outcome) => {
                records.push(
                    EvalRecord::new(
                        request.source_term.clone(),
                        outcome.outcome_class(),
                        None,
                        outcome.elapsed_seconds(),
                    )
                    .expect("no relevance attached"),
                );
            }
            Err(_) => infrastructure_errors += 1,
        }
    }
    sink.flush().map_err(write_error)?;

    print_map_summary(&records, infrastructure_errors);
    if infrastructure_errors > 0 {
        return Err(CliError::runtime(format!(
            "{infrastructure_errors} term(s) could not be processed"
        )));
    }
    Ok(())
}

/// Lines become requests; a tab separates the term from optional target
/// table and field hints. Blank lines are skipped.
fn parse_terms(raw: &str) -> Vec<MappingRequest> {
    raw.lines()
        .map(str::trim_end)
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            let mut parts = line.split('\t');
            let mut request = MappingRequest::new(parts.next().unwrap_or_default().trim());
            request.target_table =
                parts.next().map(|t| t.trim().to_string()).filter(|t| !t.is_empty());
            request.target_field =
                parts.next().map(|f| f.trim().to_string()).filter(|f| !f.is_empty());
            request
        })
        .collect()
}

/// The CSV shape is the evaluation input schema: relevance stays blank for
/// a human reviewer to fill in, so the file round-trips into `eval`.
fn write_csv_header<W: Write>(sink: &mut W) -> Result<(), CliError> {
    sink.write_all(b"term,outcome,relevance,elapsed_seconds\n").map_err(write_error)
}

fn write_csv_row<W: Write>(sink: &mut W, row: &MapRow) -> Result<(), CliError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    let record = match row {
        MapRow::Mapped { term, outcome, elapsed_seconds, .. }
        | MapRow::Failed { term, outcome, elapsed_seconds, .. } => {
            [term.to_string(), outcome.to_string(), String::new(), elapsed_seconds.to_string()]
        }
        MapRow::Errored { term, .. } => {
            [term.to_string(), "error".to_string(), String::new(), String::new()]
        }
    };
    writer.write_record(&record).map_err(|e| CliError::runtime(e.to_string()))?;
    let bytes = writer.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    sink.write_all(&bytes).map_err(write_error)
}

fn write_error(error: std::io::Error) -> CliError {
    CliError::runtime(format!("cannot write results: {error}"))
}

fn print_map_summary(records: &[EvalRecord], infrastructure_errors: usize) {
    if records.is_empty() {
        eprintln!("retrieval success not applicable (0 terms)");
    } else {
        let successes = records.iter().filter(|r| r.outcome.is_success()).count();
        let rate = successes as f64 / records.len() as f64;
        eprintln!("retrieval success {} ({successes}/{})", percent(rate), records.len());
        for (kind, share) in omop_mcp::eval::failure_distribution(records) {
            if share.count > 0 {
                eprintln!("  {} {} ({})", kind.token(), percent(share.fraction), share.count);
            }
        }
        if let Ok(timing) = timing_summary(records) {
            eprintln!("timing mean {:.2}s ± {:.2}s (SEM)", timing.mean_seconds, timing.sem_seconds);
        }
    }
    if infrastructure_errors > 0 {
        eprintln!("infrastructure errors: {infrastructure_errors}");
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let file = File::open(&args.input)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.input.display())))?;
    let input = load_eval_csv(file).map_err(|e| CliError::usage(e.to_string()))?;
    let report = EvalReport::from_input(&input).map_err(|e| CliError::usage(e.to_string()))?;

    let json = report.to_json_pretty();
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{json}"),
    }
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_fixture_validate(path: &Path) -> Result<(), CliError> {
    let raw = read_fixture(path)?;
    let mut seen = std::collections::BTreeMap::new();
    let mut concepts = 0usize;
    let mut errors = 0usize;
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let concept = match serde_json::from_str::<Concept>(line) {
            Ok(concept) => concept,
            Err(e) => {
                println!("line {line_no}: {e}");
                errors += 1;
                continue;
            }
        };
        if let Err(e) = concept.validate() {
            println!("line {line_no}: {e}");
            errors += 1;
            continue;
        }
        let id = concept.concept_id.get();
        if let Some(first_line) = seen.insert(id, line_no) {
            println!("line {line_no}: duplicate concept_id {id} (first seen on line {first_line})");
            errors += 1;
            continue;
        }
        concepts += 1;
    }
    println!("{concepts} concepts, {errors} errors");
    if errors > 0 {
        return Err(CliError::runtime(format!("{errors} invalid line(s)")));
    }
    Ok(())
}

fn cmd_fixture_stats(path: &Path) -> Result<(), CliError> {
    let index = FixtureIndex::from_ndjson_path(path)
        .map_err(|e| CliError::usage(format!("fixture {}: {e}", path.display())))?;
    let mut by_domain = std::collections::BTreeMap::new();
    let mut by_vocabulary = std::collections::BTreeMap::new();
    for concept in index.concepts() {
        *by_domain.entry(concept.domain_id.clone()).or_insert(0usize) += 1;
        *by_vocabulary.entry(concept.vocabulary_id.clone()).or_insert(0usize) += 1;
    }
    println!("{} concepts", index.len());
    println!("domains:");
    for (domain, count) in &by_domain {
        println!("  {domain}: {count}");
    }
    println!("vocabularies:");
    for (vocabulary, count) in &by_vocabulary {
        println!("  {vocabulary}: {count}");
    }
    Ok(())
}

fn read_fixture(path: &Path) -> Result<String, CliError> {
    let mut raw = String::new();
    File::open(path)
        .and_then(|mut file| file.read_to_string(&mut raw))
        .map_err(|e| CliError::usage(format!("fixture {}: {e}", path.display())))?;
    Ok(raw)
}
