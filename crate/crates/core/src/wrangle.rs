//! End-to-end wrangling: column selection, knowledge base routing, k-fold
//! snippet generation with iterative refinement, gated application, and
//! majority consensus. Also the row-wise baseline used for comparison.

use log::{debug, info, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{compute_accuracy, consensus, is_abstention, normalize, ConsensusResult, SnippetOutputs};
use crate::gateway::{CompletionRequest, ModelGateway, CODEGEN_TEMPERATURE, ROWWISE_TEMPERATURE};
use crate::kb::{retrieve_reference, Embedder, KbEntry, KbMatch, SignatureVector, DEFAULT_THRESHOLD};
use crate::prompt::{
    build_prompt, build_rowwise_prompt, parse_code, reference_sample, PromptBundle, Snippet,
    DEFAULT_TOKEN_BUDGET, REFERENCE_SAMPLE_ROWS,
};
use crate::relevance::{select_relevant_columns, RelevanceError, RelevanceParams, RelevanceResult};
use crate::safety::{safety_scan, SafetyVerdict};
use crate::sampling::{nearest_rows, row_signatures, select_diverse_samples, select_fewshot_examples};
use crate::sandbox::{row_messages, ExecError, RowMessage, RowValues, SnippetExecutor};
use crate::table::{format_rows, ground_truth, make_folds, GroundTruth, Table, TableError, LABEL_NO, LABEL_YES};
use crate::task::{Method, TaskKind, TaskSpec};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("no fold produced an applicable snippet")]
    NoSnippets(Box<WrangleReport>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub relevance: RelevanceParams,
    pub kb_threshold: f64,
    /// Prompts estimated above this many tokens are shrunk or skipped.
    pub token_budget: usize,
    pub reference_rows: usize,
    pub max_output_tokens: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            relevance: RelevanceParams::default(),
            kb_threshold: DEFAULT_THRESHOLD,
            token_budget: DEFAULT_TOKEN_BUDGET,
            reference_rows: REFERENCE_SAMPLE_ROWS,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    MemoryDependent(KbMatch),
    MemoryIndependent,
}

/// Memory-dependent exactly when a knowledge base table scores strictly above
/// the threshold against D̃.
pub fn route_workflow(d_tilde: &Table, kb: &[KbEntry], threshold: f64, embedder: &dyn Embedder) -> Route {
    match retrieve_reference(d_tilde, kb, threshold, embedder) {
        Some(m) => Route::MemoryDependent(m),
        None => Route::MemoryIndependent,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMatchSummary {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetRecord {
    pub fold_id: i64,
    pub iteration: usize,
    pub method: Method,
    pub validation_accuracy: Option<f64>,
    /// Accuracy over the full ground truth (row-alone snippets only).
    pub ground_truth_accuracy: Option<f64>,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub fold_id: i64,
    pub iteration: usize,
    pub method: Method,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrangleReport {
    pub report_version: u32,
    pub task_kind: TaskKind,
    pub dataset: String,
    pub target: String,
    pub seed: u64,
    pub method_used: Method,
    pub selected_columns: Vec<String>,
    pub relevance: Vec<(String, f64)>,
    pub kb_match: Option<KbMatchSummary>,
    pub snippets: Vec<SnippetRecord>,
    pub attempts: Vec<AttemptRecord>,
    pub accuracy: Option<f64>,
    pub llm_calls: u64,
    pub query_rows: usize,
    pub rows_changed: usize,
    pub abstention_rate: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub table: Table,
    pub report: WrangleReport,
    pub snippets: Vec<Snippet>,
}

/// Best snippet of a fold plus the log of every attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub best: Option<Snippet>,
    pub attempts: Vec<AttemptRecord>,
}

/// Ground truth with the signatures and prompt view used by example selection.
pub struct PreparedTruth {
    pub truth: GroundTruth,
    /// Rows as shown in prompts: D̃ columns, plus the label column for detection.
    pub display: Table,
    pub signatures: Vec<SignatureVector>,
}

impl PreparedTruth {
    pub fn new(truth: GroundTruth, spec: &TaskSpec, embedder: &dyn Embedder) -> Result<Self, TaskError> {
        let display = match spec.task_kind {
            TaskKind::Detect => truth.table.with_appended_column(
                &spec.detection_column(),
                truth.truth.iter().cloned().map(Some).collect(),
            )?,
            _ => truth.table.clone(),
        };
        let signatures = row_signatures(&display, embedder);
        Ok(Self {
            truth,
            display,
            signatures,
        })
    }

    pub fn subset(&self, rows: &[usize]) -> PreparedTruth {
        PreparedTruth {
            truth: self.truth.subset(rows),
            display: self.display.select_rows(rows),
            signatures: rows.iter().map(|&r| self.signatures[r].clone()).collect(),
        }
    }
}

/// Rows handed to a snippet. For imputation and correction the target cell
/// is hidden.
pub fn snippet_rows(t: &Table, rows: &[usize], spec: &TaskSpec) -> Vec<RowMessage> {
    let mask = spec.task_kind != TaskKind::Detect;
    row_messages(
        rows.iter()
            .map(|&r| {
                let mut m: RowValues = t.row_map(r);
                if mask {
                    if let Some(v) = m.get_mut(&spec.target) {
                        *v = None;
                    }
                }
                m
            })
            .collect(),
    )
}

/// Runs a snippet over ground-truth rows and scores it. Failed rows and
/// "Unknown" count as wrong.
pub fn validate_snippet(
    executor: &dyn SnippetExecutor,
    snippet: &Snippet,
    holdout: &GroundTruth,
    spec: &TaskSpec,
) -> Result<f64, ExecError> {
    let all: Vec<usize> = (0..holdout.len()).collect();
    let outcomes = executor.execute(&snippet.source, &snippet_rows(&holdout.table, &all, spec))?;
    let predicted: Vec<Option<String>> = outcomes
        .into_iter()
        .map(|o| o.ok().filter(|v| !is_abstention(v)))
        .collect();
    compute_accuracy(&predicted, &holdout.truth).map_err(|e| ExecError::Protocol(e.to_string()))
}

fn derive_seed(seed: u64, fold: usize, iteration: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iteration as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

pub struct Engine<'a> {
    pub gateway: &'a ModelGateway,
    pub executor: &'a dyn SnippetExecutor,
    pub embedder: &'a dyn Embedder,
    pub options: EngineOptions,
}

struct Selection {
    relevance: RelevanceResult,
    d_tilde: Table,
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a ModelGateway, executor: &'a dyn SnippetExecutor, embedder: &'a dyn Embedder) -> Self {
        Self {
            gateway,
            executor,
            embedder,
            options: EngineOptions::default(),
        }
    }

    pub fn with_options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    fn select(&self, d: &Table, spec: &TaskSpec) -> Result<Selection, TaskError> {
        spec.validate().map_err(TaskError::InvalidSpec)?;
        d.require_column(&spec.target)?;
        if spec.task_kind == TaskKind::Detect && d.column_index(&spec.detection_column()).is_some() {
            return Err(TaskError::InvalidSpec(format!(
                "dataset already has a `{}` column",
                spec.detection_column()
            )));
        }
        let relevance = select_relevant_columns(d, &spec.target, &self.options.relevance)?;
        let mut cols = relevance.selected.clone();
        cols.push(spec.target.clone());
        let d_tilde = d.project(&cols)?;
        info!("selected columns {:?} for `{}`", relevance.selected, spec.target);
        Ok(Selection { relevance, d_tilde })
    }

    /// Generates, validates and returns the best snippet for one fold.
    pub fn run_fold(
        &self,
        fold_id: usize,
        train: &PreparedTruth,
        holdout: &GroundTruth,
        route: &Route,
        reference: Option<&str>,
        spec: &TaskSpec,
    ) -> FoldOutcome {
        let legs: Vec<Method> = match route {
            Route::MemoryDependent(_) => vec![Method::MemoryDependent],
            Route::MemoryIndependent => vec![Method::RowAlone, Method::FewShot],
        };
        let mut best: Option<Snippet> = None;
        let mut attempts = Vec::new();
        let mut iteration = 0;
        for method in legs {
            for _ in 0..spec.max_iterations {
                iteration += 1;
                let outcome = self.attempt(fold_id, iteration, method, train, holdout, best.as_ref(), reference, spec);
                let note = match outcome {
                    Ok(snippet) => {
                        let acc = snippet.validation_accuracy.unwrap_or(0.0);
                        let note = format!("validated {acc}");
                        if best.as_ref().map_or(true, |b| acc > b.validation_accuracy.unwrap_or(0.0)) {
                            best = Some(snippet);
                        }
                        attempts.push(AttemptRecord {
                            fold_id: fold_id as i64,
                            iteration,
                            method,
                            outcome: note,
                        });
                        if acc >= spec.accuracy_gate {
                            return FoldOutcome { best, attempts };
                        }
                        continue;
                    }
                    Err(note) => note,
                };
                debug!("fold {fold_id} iteration {iteration}: {note}");
                attempts.push(AttemptRecord {
                    fold_id: fold_id as i64,
                    iteration,
                    method,
                    outcome: note,
                });
            }
        }
        FoldOutcome { best, attempts }
    }

    fn example_rows(&self, method: Method, train: &PreparedTruth, seed: u64, spec: &TaskSpec) -> Vec<usize> {
        let n = train.truth.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match method {
            Method::RowAlone => select_diverse_samples(&train.signatures, spec.n_example_rows, seed),
            Method::FewShot => {
                let r = rng.gen_range(0..n);
                let mut rows = vec![r];
                rows.extend(select_fewshot_examples(&train.signatures, r, spec.fewshot_count));
                rows
            }
            Method::MemoryDependent | Method::RowWiseBaseline => {
                let mut rows = sample(&mut rng, n, spec.n_example_rows.min(n)).into_vec();
                rows.sort_unstable();
                rows
            }
        }
    }

    /// Builds a prompt that fits the token budget by dropping example rows.
    fn fitted_prompt(
        &self,
        train: &PreparedTruth,
        rows: &[usize],
        best: Option<&Snippet>,
        reference: Option<&str>,
        iteration: usize,
        spec: &TaskSpec,
    ) -> Option<PromptBundle> {
        let mut take = rows.len();
        while take > 0 {
            let examples = format_rows(&train.display, &rows[..take], true);
            let bundle = build_prompt(spec, &examples, best, reference, iteration);
            if bundle.token_estimate <= self.options.token_budget {
                return Some(bundle);
            }
            take /= 2;
        }
        None
    }

    #[allow(clippy::too_many_arguments)]
    fn attempt(
        &self,
        fold_id: usize,
        iteration: usize,
        method: Method,
        train: &PreparedTruth,
        holdout: &GroundTruth,
        best: Option<&Snippet>,
        reference: Option<&str>,
        spec: &TaskSpec,
    ) -> Result<Snippet, String> {
        let seed = derive_seed(spec.seed, fold_id, iteration);
        let rows = self.example_rows(method, train, seed, spec);
        let reference = reference.filter(|_| method == Method::MemoryDependent);
        let bundle = self
            .fitted_prompt(train, &rows, best, reference, iteration, spec)
            .ok_or_else(|| "prompt exceeds token budget".to_string())?;
        let mut req = CompletionRequest::new(
            bundle.render(),
            CODEGEN_TEMPERATURE,
            format!("fold{fold_id}/iter{iteration}/{method}"),
        );
        req.max_output_tokens = self.options.max_output_tokens;
        let response = self.gateway.complete(&req).map_err(|e| format!("call failed: {e}"))?;
        let source = parse_code(&response).ok_or_else(|| "no code in response".to_string())?;
        if let SafetyVerdict::Reject(reason) = safety_scan(&source) {
            return Err(format!("rejected: {reason}"));
        }
        let mut snippet = Snippet::new(source, fold_id as i64, iteration, method);
        let acc = validate_snippet(self.executor, &snippet, holdout, spec).map_err(|e| {
            warn!("fold {fold_id} iteration {iteration}: snippet discarded: {e}");
            format!("discarded: {e}")
        })?;
        snippet.validation_accuracy = Some(acc);
        Ok(snippet)
    }

    /// Runs the full code-generation pipeline. `truth`, when given, is a
    /// clean copy of `d` used only to score the output.
    pub fn run_task(
        &self,
        d: &Table,
        spec: &TaskSpec,
        kb: &[KbEntry],
        annotations: Option<&Table>,
        truth: Option<&Table>,
    ) -> Result<TaskOutput, TaskError> {
        let calls_before = self.gateway.total_calls();
        let Selection { relevance, d_tilde } = self.select(d, spec)?;
        let route = route_workflow(&d_tilde, kb, self.options.kb_threshold, self.embedder);
        let reference = match &route {
            Route::MemoryDependent(m) => {
                info!("memory-dependent route via `{}` (score {:.4})", m.entry_id, m.score);
                kb.iter()
                    .find(|e| e.id == m.entry_id)
                    .map(|e| reference_sample(&e.table, self.options.reference_rows))
            }
            Route::MemoryIndependent => None,
        };
        let g = PreparedTruth::new(ground_truth(&d_tilde, spec, annotations)?, spec, self.embedder)?;
        let plan = make_folds(g.truth.len(), spec.k_folds, spec.seed)?;

        let mut fold_bests = Vec::new();
        let mut attempts = Vec::new();
        for fold in 0..spec.k_folds {
            let train = g.subset(&plan.training(fold));
            let holdout = g.truth.subset(&plan.holdout(fold));
            let outcome = self.run_fold(fold, &train, &holdout, &route, reference.as_deref(), spec);
            attempts.extend(outcome.attempts);
            fold_bests.extend(outcome.best);
        }

        let mut records = Vec::new();
        let mut applicable = Vec::new();
        for s in fold_bests {
            let (ground_truth_accuracy, applied) = if s.method == Method::RowAlone {
                match validate_snippet(self.executor, &s, &g.truth, spec) {
                    Ok(acc) => (Some(acc), acc >= spec.accuracy_gate),
                    Err(e) => {
                        warn!("fold {} snippet failed on full ground truth: {e}", s.fold_id);
                        (None, false)
                    }
                }
            } else {
                (None, true)
            };
            records.push(SnippetRecord {
                fold_id: s.fold_id,
                iteration: s.iteration,
                method: s.method,
                validation_accuracy: s.validation_accuracy,
                ground_truth_accuracy,
                applied,
            });
            if applied {
                applicable.push(s);
            }
        }

        let method_used = match &route {
            Route::MemoryDependent(_) => Method::MemoryDependent,
            Route::MemoryIndependent if records.iter().any(|r| r.applied && r.method == Method::FewShot) => {
                Method::FewShot
            }
            Route::MemoryIndependent => Method::RowAlone,
        };
        let mut report = WrangleReport {
            report_version: REPORT_VERSION,
            task_kind: spec.task_kind,
            dataset: d.name().to_string(),
            target: spec.target.clone(),
            seed: spec.seed,
            method_used,
            selected_columns: relevance.selected.clone(),
            relevance: relevance.ranked.clone(),
            kb_match: match &route {
                Route::MemoryDependent(m) => Some(KbMatchSummary {
                    id: m.entry_id.clone(),
                    score: m.score,
                }),
                Route::MemoryIndependent => None,
            },
            snippets: records,
            attempts,
            accuracy: None,
            llm_calls: 0,
            query_rows: 0,
            rows_changed: 0,
            abstention_rate: 0.0,
            warnings: Vec::new(),
        };
        if applicable.is_empty() {
            report.llm_calls = self.gateway.total_calls() - calls_before;
            return Err(TaskError::NoSnippets(Box::new(report)));
        }

        let query = query_rows(&d_tilde, spec);
        let messages = snippet_rows(&d_tilde, &query, spec);
        let outputs: Vec<SnippetOutputs> = applicable
            .par_iter()
            .map(|s| {
                let values = match self.executor.execute(&s.source, &messages) {
                    Ok(outcomes) => outcomes.into_iter().map(Result::ok).collect(),
                    Err(e) => {
                        warn!("fold {} snippet failed on the dataset: {e}", s.fold_id);
                        vec![None; messages.len()]
                    }
                };
                SnippetOutputs {
                    fold_id: s.fold_id,
                    validation_accuracy: s.validation_accuracy.unwrap_or(0.0),
                    values,
                }
            })
            .collect();
        let votes = consensus(&outputs);
        self.finish(d, spec, &query, &votes, truth, report, applicable, calls_before)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        d: &Table,
        spec: &TaskSpec,
        query: &[usize],
        votes: &ConsensusResult,
        truth: Option<&Table>,
        mut report: WrangleReport,
        snippets: Vec<Snippet>,
        calls_before: u64,
    ) -> Result<TaskOutput, TaskError> {
        let (table, rows_changed) = apply_consensus(d, spec, query, votes)?;
        report.query_rows = query.len();
        report.rows_changed = rows_changed;
        report.abstention_rate = if query.is_empty() {
            0.0
        } else {
            votes.abstained.len() as f64 / query.len() as f64
        };
        if let Some(truth) = truth {
            report.accuracy = evaluate(d, &table, truth, spec, query)?;
        }
        report.llm_calls = self.gateway.total_calls() - calls_before;
        Ok(TaskOutput {
            table,
            report,
            snippets,
        })
    }

    /// One model call per query row, answering directly.
    pub fn run_baseline(
        &self,
        d: &Table,
        spec: &TaskSpec,
        annotations: Option<&Table>,
        truth: Option<&Table>,
    ) -> Result<TaskOutput, TaskError> {
        let calls_before = self.gateway.total_calls();
        let Selection { relevance, d_tilde } = self.select(d, spec)?;
        let g = PreparedTruth::new(ground_truth(&d_tilde, spec, annotations)?, spec, self.embedder)?;
        let query = query_rows(&d_tilde, spec);
        let mut answers = Vec::with_capacity(query.len());
        for &q in &query {
            let sig = self.embedder.embed(&[format_rows(&d_tilde, &[q], false).as_str()]);
            let own = g.truth.source_rows.iter().position(|&s| s == q);
            let neighbours = nearest_rows(&g.signatures, &sig, own, spec.fewshot_count);
            let examples = format_rows(&g.display, &neighbours, true);
            let bundle = build_rowwise_prompt(spec, &d_tilde, q, &examples);
            let mut req = CompletionRequest::new(bundle.render(), ROWWISE_TEMPERATURE, format!("row{q}/{}", Method::RowWiseBaseline));
            req.max_output_tokens = 64;
            answers.push(match self.gateway.complete(&req) {
                Ok(text) => parse_answer(&text),
                Err(e) => {
                    warn!("row {q}: {e}");
                    None
                }
            });
        }
        let votes = consensus(&[SnippetOutputs {
            fold_id: -1,
            validation_accuracy: 0.0,
            values: answers,
        }]);
        let report = WrangleReport {
            report_version: REPORT_VERSION,
            task_kind: spec.task_kind,
            dataset: d.name().to_string(),
            target: spec.target.clone(),
            seed: spec.seed,
            method_used: Method::RowWiseBaseline,
            selected_columns: relevance.selected.clone(),
            relevance: relevance.ranked,
            kb_match: None,
            snippets: Vec::new(),
            attempts: Vec::new(),
            accuracy: None,
            llm_calls: 0,
            query_rows: 0,
            rows_changed: 0,
            abstention_rate: 0.0,
            warnings: Vec::new(),
        };
        self.finish(d, spec, &query, &votes, truth, report, Vec::new(), calls_before)
    }
}

/// First non-empty line of a row-wise answer, without surrounding quotes.
pub fn parse_answer(text: &str) -> Option<String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with("```"))?;
    let line = line.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
    (!line.is_empty()).then(|| line.to_string())
}

/// Rows a task writes to: NULL targets for imputation, non-NULL targets for
/// correction, every row for detection.
pub fn query_rows(t: &Table, spec: &TaskSpec) -> Vec<usize> {
    let c = t.column_index(&spec.target).expect("target checked by caller");
    (0..t.row_count())
        .filter(|&r| match spec.task_kind {
            TaskKind::Impute => t.row(r)[c].is_none(),
            TaskKind::Correct => t.row(r)[c].is_some(),
            TaskKind::Detect => true,
        })
        .collect()
}

fn canonical_label(v: &str) -> Option<String> {
    match normalize(v).as_str() {
        "yes" => Some(LABEL_YES.to_string()),
        "no" => Some(LABEL_NO.to_string()),
        _ => None,
    }
}

/// Writes consensus values into a copy of `d`. Returns the table and the
/// number of cells written.
pub fn apply_consensus(
    d: &Table,
    spec: &TaskSpec,
    query: &[usize],
    votes: &ConsensusResult,
) -> Result<(Table, usize), TaskError> {
    let target = d.require_column(&spec.target)?;
    let mut changed = 0;
    match spec.task_kind {
        TaskKind::Impute | TaskKind::Correct => {
            let mut values: Vec<Option<String>> = d.column_values(target).map(|v| v.map(str::to_string)).collect();
            for (i, &row) in query.iter().enumerate() {
                let Some(v) = votes.value(i) else { continue };
                let differs = values[row].as_deref().map_or(true, |old| normalize(old) != normalize(v));
                if differs {
                    values[row] = Some(v.to_string());
                    changed += 1;
                }
            }
            Ok((d.with_column_values(target, values), changed))
        }
        TaskKind::Detect => {
            let mut labels = vec![None; d.row_count()];
            for (i, &row) in query.iter().enumerate() {
                labels[row] = votes.value(i).and_then(canonical_label);
                changed += labels[row].is_some() as usize;
            }
            Ok((d.with_appended_column(&spec.detection_column(), labels)?, changed))
        }
    }
}

/// Accuracy of the output against a clean copy of the dataset, over the
/// query rows. For detection the expected label is "Yes" exactly where the
/// input differs from the clean value.
fn evaluate(d: &Table, output: &Table, truth: &Table, spec: &TaskSpec, query: &[usize]) -> Result<Option<f64>, TaskError> {
    if query.is_empty() {
        return Ok(None);
    }
    if truth.row_count() != d.row_count() {
        return Err(TaskError::Evaluation(format!(
            "truth table has {} rows, dataset has {}",
            truth.row_count(),
            d.row_count()
        )));
    }
    let tc = truth.require_column(&spec.target)?;
    let dc = d.require_column(&spec.target)?;
    let (predicted, expected): (Vec<Option<String>>, Vec<String>) = match spec.task_kind {
        TaskKind::Impute | TaskKind::Correct => query
            .iter()
            .map(|&r| {
                (
                    output.row(r)[dc].clone(),
                    truth.row(r)[tc].clone().unwrap_or_default(),
                )
            })
            .unzip(),
        TaskKind::Detect => {
            let lc = output.require_column(&spec.detection_column())?;
            query
                .iter()
                .map(|&r| {
                    let dirty = d.row(r)[dc].as_deref().map(normalize);
                    let clean = truth.row(r)[tc].as_deref().map(normalize);
                    let label = if dirty == clean { LABEL_NO } else { LABEL_YES };
                    (output.row(r)[lc].clone(), label.to_string())
                })
                .unzip()
        }
    };
    compute_accuracy(&predicted, &expected)
        .map(Some)
        .map_err(|e| TaskError::Evaluation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_are_first_line_unquoted() {
        assert_eq!(parse_answer("\n  \"Paris\" \nbecause"), Some("Paris".into()));
        assert_eq!(parse_answer("```\nYes\n```"), Some("Yes".into()));
        assert_eq!(parse_answer("   "), None);
    }

    #[test]
    fn query_rows_per_kind() {
        let t = Table::from_strs("t", &["a", "y"], &[vec![Some("1"), None], vec![Some("2"), Some("k")]]).unwrap();
        assert_eq!(query_rows(&t, &TaskSpec::new(TaskKind::Impute, "y")), vec![0]);
        assert_eq!(query_rows(&t, &TaskSpec::new(TaskKind::Correct, "y")), vec![1]);
        assert_eq!(query_rows(&t, &TaskSpec::new(TaskKind::Detect, "y")), vec![0, 1]);
    }

    #[test]
    fn correction_keeps_abstentions_and_matches() {
        let t = Table::from_strs(
            "t",
            &["a", "y"],
            &[vec![Some("1"), Some("x")], vec![Some("2"), Some("Y ")], vec![Some("3"), Some("z")]],
        )
        .unwrap();
        let spec = TaskSpec::new(TaskKind::Correct, "y");
        let votes = consensus(&[SnippetOutputs {
            fold_id: 0,
            validation_accuracy: 1.0,
            values: vec![Some("w".into()), Some("y".into()), Some("Unknown".into())],
        }]);
        let (out, changed) = apply_consensus(&t, &spec, &[0, 1, 2], &votes).unwrap();
        assert_eq!(changed, 1);
        assert_eq!(out.cell(0, "y"), Some("w"));
        assert_eq!(out.cell(1, "y"), Some("Y "));
        assert_eq!(out.cell(2, "y"), Some("z"));
    }

    #[test]
    fn detection_appends_one_column() {
        let t = Table::from_strs("t", &["y"], &[vec![Some("1")], vec![Some("2")]]).unwrap();
        let spec = TaskSpec::new(TaskKind::Detect, "y");
        let votes = consensus(&[SnippetOutputs {
            fold_id: 0,
            validation_accuracy: 1.0,
            values: vec![Some("yes".into()), Some("Unknown".into())],
        }]);
        let (out, _) = apply_consensus(&t, &spec, &[0, 1], &votes).unwrap();
        assert_eq!(out.columns(), ["y", "y_is_error"]);
        assert_eq!(out.cell(0, "y_is_error"), Some("Yes"));
        assert_eq!(out.cell(1, "y_is_error"), None);
    }
}
