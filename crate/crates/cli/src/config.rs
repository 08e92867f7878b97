//! Job configuration: a TOML or JSON file, overridden by command-line flags.
//!
//! Paths inside a config file are resolved relative to the file's directory;
//! paths given as flags are resolved relative to the working directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use codewrangle_core::gateway::BackendSettings;
use codewrangle_core::sandbox::ProcessExecutor;
use codewrangle_core::task::{TaskKind, TaskSpec};
use codewrangle_core::wrangle::EngineOptions;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Generate, validate and apply snippets.
    Codegen,
    /// One model call per query row.
    RowWiseBaseline,
}

/// Flags of `run`. Each has a config-file key, named in its help text.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Config file (.toml or .json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// impute, detect or correct [task.kind]
    #[arg(long)]
    pub task: Option<String>,
    /// Target column [task.target]
    #[arg(long)]
    pub target: Option<String>,
    /// Input CSV [data.path]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Detection labels: CSV with row_id,label columns [data.annotations]
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Clean copy of the input, used only to report accuracy [data.truth]
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Knowledge base directory of CSV files [kb.dir]
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Knowledge base similarity threshold [kb.similarity_threshold]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// http, replay:<fixture.json> or scripted:<rules.json> [model.backend]
    #[arg(long)]
    pub backend: Option<String>,
    /// codegen or row_wise_baseline [task.mode]
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Output CSV [output.table]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report JSON; printed to stdout when absent [output.report]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the model exchanges as a replay fixture [output.fixture]
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// [task.seed]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [task.k_folds]
    #[arg(long)]
    pub k_folds: Option<usize>,
    /// Iterations per method leg [task.max_iterations]
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    task: TaskSection,
    data: DataSection,
    kb: KbSection,
    model: ModelSection,
    sandbox: SandboxSection,
    output: OutputSection,
    relevance: RelevanceSection,
    prompt: PromptSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TaskSection {
    kind: Option<String>,
    target: Option<String>,
    mode: Option<Mode>,
    seed: Option<u64>,
    k_folds: Option<usize>,
    max_iterations: Option<usize>,
    accuracy_gate: Option<f64>,
    n_example_rows: Option<usize>,
    fewshot_count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    path: Option<PathBuf>,
    annotations: Option<PathBuf>,
    truth: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct KbSection {
    dir: Option<PathBuf>,
    similarity_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    backend: Option<String>,
    endpoint: Option<String>,
    name: Option<String>,
    credential_env: Option<String>,
    timeout_secs: Option<u64>,
    retries: Option<u32>,
    max_in_flight: Option<usize>,
    max_output_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SandboxSection {
    command: Option<Vec<String>>,
    batch_timeout_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OutputSection {
    table: Option<PathBuf>,
    report: Option<PathBuf>,
    fixture: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RelevanceSection {
    cumulative_share: Option<f64>,
    max_selected: Option<usize>,
    rounds: Option<usize>,
    max_depth: Option<usize>,
    learning_rate: Option<f64>,
    min_samples_leaf: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PromptSection {
    token_budget: Option<usize>,
    reference_rows: Option<usize>,
}

/// Everything a `run` needs, fully resolved.
#[derive(Debug)]
pub struct JobConfig {
    pub data: PathBuf,
    pub annotations: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub spec: TaskSpec,
    pub mode: Mode,
    pub backend: BackendSettings,
    pub retries: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub options: EngineOptions,
    pub sandbox: Option<ProcessExecutor>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("invalid config {}", path.display()))
}

fn parse_backend(spec: &str, base: &Path, model: &ModelSection) -> Result<BackendSettings> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    Ok(match (kind, arg) {
        ("http", "") => BackendSettings::Http {
            endpoint: model.endpoint.clone(),
            model: model.name.clone(),
            credential_env: model.credential_env.clone(),
            timeout_secs: model.timeout_secs.unwrap_or(120),
        },
        ("replay", path) if !path.is_empty() => BackendSettings::Replay {
            fixture: base.join(path),
        },
        ("scripted", path) if !path.is_empty() => BackendSettings::Scripted { rules: base.join(path) },
        _ => bail!("unknown backend `{spec}` (expected http, replay:<file> or scripted:<file>)"),
    })
}

impl JobConfig {
    /// Merges the config file (if any) with flags; flags win.
    pub fn resolve(args: &RunArgs) -> Result<JobConfig> {
        let (file, base) = match &args.config {
            Some(p) => (
                read_file_config(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (FileConfig::default(), PathBuf::new()),
        };
        let from_file = |p: &Option<PathBuf>| p.as_ref().map(|p| base.join(p));
        let pick = |flag: &Option<PathBuf>, key: &Option<PathBuf>| flag.clone().or_else(|| from_file(key));

        let kind_text = args
            .task
            .clone()
            .or(file.task.kind.clone())
            .context("missing task kind (--task or task.kind)")?;
        let kind: TaskKind = kind_text.parse().map_err(anyhow::Error::msg)?;
        let target = args
            .target
            .clone()
            .or(file.task.target.clone())
            .context("missing target column (--target or task.target)")?;
        let mut spec = TaskSpec::new(kind, target);
        let t = &file.task;
        spec.seed = args.seed.or(t.seed).unwrap_or(spec.seed);
        spec.k_folds = args.k_folds.or(t.k_folds).unwrap_or(spec.k_folds);
        spec.max_iterations = args.max_iterations.or(t.max_iterations).unwrap_or(spec.max_iterations);
        spec.accuracy_gate = t.accuracy_gate.unwrap_or(spec.accuracy_gate);
        spec.n_example_rows = t.n_example_rows.unwrap_or(spec.n_example_rows);
        spec.fewshot_count = t.fewshot_count.unwrap_or(spec.fewshot_count);
        spec.validate().map_err(anyhow::Error::msg)?;

        let data = pick(&args.data, &file.data.path).context("missing input table (--data or data.path)")?;
        let annotations = pick(&args.annotations, &file.data.annotations);
        if kind == TaskKind::Detect && annotations.is_none() {
            bail!("detection needs labelled rows: pass --annotations (or data.annotations)");
        }
        let mode = args.mode.or(t.mode).unwrap_or(Mode::Codegen);

        let backend = match (&args.backend, &file.model.backend) {
            (Some(flag), _) => parse_backend(flag, Path::new(""), &file.model)?,
            (None, Some(key)) => parse_backend(key, &base, &file.model)?,
            (None, None) => bail!("missing model backend (--backend or model.backend)"),
        };

        let mut options = EngineOptions::default();
        options.kb_threshold = args.threshold.or(file.kb.similarity_threshold).unwrap_or(options.kb_threshold);
        if !(0.0..=1.0).contains(&options.kb_threshold) {
            bail!("similarity threshold must be in [0, 1], got {}", options.kb_threshold);
        }
        let r = &file.relevance;
        let rel = &mut options.relevance;
        rel.cumulative_share = r.cumulative_share.unwrap_or(rel.cumulative_share);
        rel.max_selected = r.max_selected.unwrap_or(rel.max_selected);
        rel.boost.rounds = r.rounds.unwrap_or(rel.boost.rounds);
        rel.boost.max_depth = r.max_depth.unwrap_or(rel.boost.max_depth);
        rel.boost.learning_rate = r.learning_rate.unwrap_or(rel.boost.learning_rate);
        rel.boost.min_samples_leaf = r.min_samples_leaf.unwrap_or(rel.boost.min_samples_leaf);
        rel.boost.seed = spec.seed;
        options.token_budget = file.prompt.token_budget.unwrap_or(options.token_budget);
        options.reference_rows = file.prompt.reference_rows.unwrap_or(options.reference_rows);
        options.max_output_tokens = file.model.max_output_tokens.unwrap_or(options.max_output_tokens);

        let sandbox = match &file.sandbox.command {
            Some(cmd) if !cmd.is_empty() => {
                let mut exec = ProcessExecutor::new(cmd.clone());
                if let Some(ms) = file.sandbox.batch_timeout_ms {
                    exec = exec.with_batch_timeout(Duration::from_millis(ms));
                }
                Some(exec)
            }
            _ => None,
        };
        if mode == Mode::Codegen && sandbox.is_none() {
            bail!("codegen mode needs a snippet runner: set sandbox.command in the config file");
        }

        Ok(JobConfig {
            data,
            annotations,
            truth: pick(&args.truth, &file.data.truth),
            kb: pick(&args.kb, &file.kb.dir),
            spec,
            mode,
            backend,
            retries: file.model.retries,
            max_in_flight: file.model.max_in_flight,
            options,
            sandbox,
            out: pick(&args.out, &file.output.table),
            report: pick(&args.report, &file.output.report),
            fixture: pick(&args.record, &file.output.fixture),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "job.toml",
            r#"
[task]
kind = "impute"
target = "a"
seed = 3
k_folds = 4
mode = "row_wise_baseline"

[data]
path = "d.csv"

[kb]
similarity_threshold = 0.8

[model]
backend = "replay:fix.json"
"#,
        );
        let args = RunArgs {
            config: Some(cfg),
            seed: Some(9),
            ..RunArgs::default()
        };
        let job = JobConfig::resolve(&args).unwrap();
        assert_eq!(job.spec.seed, 9);
        assert_eq!(job.spec.k_folds, 4);
        assert_eq!(job.mode, Mode::RowWiseBaseline);
        assert_eq!(job.options.kb_threshold, 0.8);
        assert_eq!(job.data, dir.path().join("d.csv"));
        assert_eq!(
            job.backend,
            BackendSettings::Replay {
                fixture: dir.path().join("fix.json")
            }
        );
    }

    #[test]
    fn json_config_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(
            dir.path(),
            "a.json",
            r#"{"task": {"kind": "correct", "target": "x"}, "data": {"path": "d.csv"},
                "model": {"backend": "scripted:r.json"}, "sandbox": {"command": ["python3", "runner.py"]}}"#,
        );
        let job = JobConfig::resolve(&RunArgs {
            config: Some(ok),
            ..RunArgs::default()
        })
        .unwrap();
        assert_eq!(job.spec.task_kind, TaskKind::Correct);
        assert_eq!(job.sandbox.unwrap().command, ["python3", "runner.py"]);

        let typo = write(dir.path(), "b.toml", "[task]\nknd = \"impute\"\n");
        let err = JobConfig::resolve(&RunArgs {
            config: Some(typo),
            ..RunArgs::default()
        })
        .unwrap_err();
        assert!(format!("{err:#}").contains("knd"), "{err:#}");
    }

    #[test]
    fn detect_requires_annotations() {
        let args = RunArgs {
            task: Some("detect".into()),
            target: Some("a".into()),
            data: Some("d.csv".into()),
            backend: Some("replay:f.json".into()),
            mode: Some(Mode::RowWiseBaseline),
            ..RunArgs::default()
        };
        let err = JobConfig::resolve(&args).unwrap_err();
        assert!(err.to_string().contains("--annotations"));
    }

    #[test]
    fn backend_strings() {
        let m = ModelSection::default();
        assert!(matches!(parse_backend("http", Path::new(""), &m), Ok(BackendSettings::Http { .. })));
        assert!(parse_backend("replay:", Path::new(""), &m).is_err());
        assert!(parse_backend("grpc:x", Path::new(""), &m).is_err());
    }
}
