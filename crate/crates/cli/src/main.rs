//! `codewrangle`: command-line driver for the code-generating wrangling engine.
//!
//! Exit codes: 0 success, 1 task failure (no snippet could be applied),
//! 64 usage or configuration error.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use codewrangle_core::gateway::{configure_backend, ModelGateway, DEFAULT_RETRIES};
use codewrangle_core::kb::{ingest_kb, SignatureCache, CACHE_FILE};
use codewrangle_core::sandbox::{SnippetExecutor, StubExecutor};
use codewrangle_core::synth::{self, fenced, STORES_NEAR_MISS, STORES_RULE};
use codewrangle_core::table::{load_table, write_table, Table, DEFAULT_NULL_TOKENS};
use codewrangle_core::wrangle::{Engine, TaskError, WrangleReport, REPORT_VERSION};
use codewrangle_core::HashingEmbedder;

use crate::config::{JobConfig, Mode, RunArgs};

const EXIT_TASK_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "codewrangle", version, about = "Clean tables with validated, LLM-written Python snippets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Impute, detect or correct one target column.
    Run(Box<RunArgs>),
    /// Compare two run reports side by side (accuracy and model calls).
    Eval { report_a: PathBuf, report_b: PathBuf },
    /// Manage a knowledge base directory.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Write demonstration fixtures.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Signature every CSV in DIR and write the signature cache.
    Ingest { dir: PathBuf },
    /// List the entries recorded in DIR's signature cache.
    List { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// The 24-hour stores table: dirty, clean and corrupted copies plus scripted model rules.
    Stores {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 50)]
        masked: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// A configuration problem, reported with exit code 64.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

trait OrUsage<T> {
    fn or_usage(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrUsage<T> for std::result::Result<T, E> {
    fn or_usage(self) -> Result<T> {
        self.map_err(|e| UsageError(e.into()).into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Eval { report_a, report_b } => cmd_eval(&report_a, &report_b).map(|()| ExitCode::SUCCESS),
        Command::Kb(KbCommand::Ingest { dir }) => cmd_kb_ingest(&dir).map(|()| ExitCode::SUCCESS),
        Command::Kb(KbCommand::List { dir }) => cmd_kb_list(&dir).map(|()| ExitCode::SUCCESS),
        Command::Synth(SynthCommand::Stores { dir, rows, masked, seed }) => {
            cmd_synth_stores(&dir, rows, masked, seed).map(|()| ExitCode::SUCCESS)
        }
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        if e.is::<UsageError>() {
            ExitCode::from(EXIT_USAGE)
        } else {
            ExitCode::from(EXIT_TASK_FAILURE)
        }
    })
}

fn read_input(path: &Path, what: &str) -> Result<Table> {
    load_table(path, &DEFAULT_NULL_TOKENS)
        .with_context(|| format!("cannot load {what} {}", path.display()))
        .or_usage()
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let job = JobConfig::resolve(args).or_usage()?;
    let data = read_input(&job.data, "input table")?;
    let annotations = job.annotations.as_deref().map(|p| read_input(p, "annotations")).transpose()?;
    let truth = job.truth.as_deref().map(|p| read_input(p, "truth table")).transpose()?;

    let embedder = HashingEmbedder::default();
    let kb = match &job.kb {
        Some(dir) => ingest_kb(dir, &embedder).or_usage()?,
        None => Default::default(),
    };
    let backend = configure_backend(&job.backend).or_usage()?;
    let mut gateway = ModelGateway::new(backend).with_retries(job.retries.unwrap_or(DEFAULT_RETRIES), Duration::from_millis(500));
    if let Some(n) = job.max_in_flight {
        gateway = gateway.with_max_in_flight(n);
    }

    let stub = StubExecutor::new();
    let executor: &dyn SnippetExecutor = match &job.sandbox {
        Some(process) => process,
        None => &stub,
    };
    let engine = Engine::new(&gateway, executor, &embedder).with_options(job.options.clone());
    let result = match job.mode {
        Mode::Codegen => engine.run_task(&data, &job.spec, &kb.entries, annotations.as_ref(), truth.as_ref()),
        Mode::RowWiseBaseline => engine.run_baseline(&data, &job.spec, annotations.as_ref(), truth.as_ref()),
    };

    if let Some(path) = &job.fixture {
        let text = serde_json::to_string_pretty(&gateway.recorded_fixture())?;
        std::fs::write(path, text).with_context(|| format!("cannot write fixture {}", path.display()))?;
    }
    let mut output = match result {
        Ok(output) => output,
        Err(TaskError::NoSnippets(report)) => {
            let mut report = *report;
            report.warnings.extend(kb.warnings.iter().cloned());
            eprintln!("error: no snippet passed validation; report written, table left untouched");
            emit_report(&report, job.report.as_deref())?;
            return Ok(ExitCode::from(EXIT_TASK_FAILURE));
        }
        Err(e @ (TaskError::InvalidSpec(_) | TaskError::Table(_))) => return Err(UsageError(e.into()).into()),
        Err(e) => return Err(e.into()),
    };
    output.report.warnings.extend(kb.warnings.iter().cloned());
    if let Some(path) = &job.out {
        write_table(&output.table, path).with_context(|| format!("cannot write {}", path.display()))?;
    }
    emit_report(&output.report, job.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

/// Writes the report to `path`, or to stdout when no path is configured.
fn emit_report(report: &WrangleReport, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write report {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_report(path: &Path) -> Result<WrangleReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read report {}", path.display()))
        .or_usage()?;
    let report: WrangleReport = serde_json::from_str(&text)
        .with_context(|| format!("invalid report {}", path.display()))
        .or_usage()?;
    if report.report_version != REPORT_VERSION {
        return Err(UsageError(anyhow::anyhow!(
            "{}: report version {} is not supported (expected {REPORT_VERSION})",
            path.display(),
            report.report_version
        ))
        .into());
    }
    Ok(report)
}

/// One comparison cell: accuracy with the call count, e.g. `0.97 (#1376)`.
fn comparison_cell(report: &WrangleReport) -> String {
    match report.accuracy {
        Some(a) => format!("{a:.2} (#{})", report.llm_calls),
        None => format!("n/a (#{})", report.llm_calls),
    }
}

fn cmd_eval(a: &Path, b: &Path) -> Result<()> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    if (ra.dataset.as_str(), ra.task_kind, ra.target.as_str()) != (rb.dataset.as_str(), rb.task_kind, rb.target.as_str()) {
        return Err(UsageError(anyhow::anyhow!(
            "reports describe different runs: {}/{}/{} vs {}/{}/{}",
            ra.dataset,
            ra.task_kind,
            ra.target,
            rb.dataset,
            rb.task_kind,
            rb.target
        ))
        .into());
    }
    let label = |r: &WrangleReport| r.method_used.as_str().to_string();
    let rows = [
        ["dataset".to_string(), "task".into(), "target".into(), label(&ra), label(&rb)],
        [ra.dataset.clone(), ra.task_kind.to_string(), ra.target.clone(), comparison_cell(&ra), comparison_cell(&rb)],
    ];
    let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", cells.join(" | ").trim_end());
    }
    Ok(())
}

fn cmd_kb_ingest(dir: &Path) -> Result<()> {
    let ingest = ingest_kb(dir, &HashingEmbedder::default()).or_usage()?;
    for w in &ingest.warnings {
        eprintln!("warning: {w}");
    }
    SignatureCache::from_ingest(&ingest).write(&dir.join(CACHE_FILE))?;
    println!("{} entries, {} warnings", ingest.entries.len(), ingest.warnings.len());
    Ok(())
}

fn cmd_kb_list(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(UsageError(anyhow::anyhow!("{} is not a directory", dir.display())).into());
    }
    let cache = SignatureCache::read(&dir.join(CACHE_FILE))?;
    for e in &cache.entries {
        let description = e.description.as_deref().map(|d| format!("  {d}")).unwrap_or_default();
        println!("{}\t{} columns\t{} rows{description}", e.id, e.columns.len(), e.row_count);
    }
    Ok(())
}

fn cmd_synth_stores(dir: &Path, rows: usize, masked: usize, seed: u64) -> Result<()> {
    if masked > rows {
        return Err(UsageError(anyhow::anyhow!("--masked {masked} exceeds --rows {rows}")).into());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let f = synth::stores(rows, masked, seed);
    let (corrupted, _) = synth::corrupt_stores(&f.clean, masked, seed ^ 1);
    write_table(&f.dirty, &dir.join("stores.csv"))?;
    write_table(&f.clean, &dir.join("stores_clean.csv"))?;
    write_table(&corrupted, &dir.join("stores_corrupted.csv"))?;
    // First call answers with a near miss, later calls with the rule.
    let rules = serde_json::json!([{
        "pattern": "",
        "responses": [fenced(STORES_NEAR_MISS), fenced(STORES_RULE)],
    }]);
    std::fs::write(dir.join("rules.json"), serde_json::to_string_pretty(&rules)?)?;
    println!("wrote stores.csv, stores_clean.csv, stores_corrupted.csv and rules.json to {}", dir.display());
    Ok(())
}
