//! Task definitions shared by every pipeline stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Impute,
    Detect,
    Correct,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Impute => "impute",
            TaskKind::Detect => "detect",
            TaskKind::Correct => "correct",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "impute" => Ok(TaskKind::Impute),
            "detect" => Ok(TaskKind::Detect),
            "correct" => Ok(TaskKind::Correct),
            other => Err(format!("unknown task `{other}` (expected impute, detect or correct)")),
        }
    }
}

/// How a snippet (or a whole run) was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RowAlone,
    FewShot,
    MemoryDependent,
    RowWiseBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::RowAlone => "row_alone",
            Method::FewShot => "few_shot",
            Method::MemoryDependent => "memory_dependent",
            Method::RowWiseBaseline => "row_wise_baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One wrangling task over a single target column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_kind: TaskKind,
    pub target: String,
    pub k_folds: usize,
    /// Iterations per method leg.
    pub max_iterations: usize,
    /// Minimum accuracy on the full ground truth for a row-alone snippet to be applied.
    pub accuracy_gate: f64,
    pub n_example_rows: usize,
    pub fewshot_count: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task_kind: TaskKind, target: impl Into<String>) -> Self {
        Self {
            task_kind,
            target: target.into(),
            k_folds: 5,
            max_iterations: 3,
            accuracy_gate: 0.9,
            n_example_rows: 10,
            fewshot_count: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.target.is_empty() {
            return Err("target column is empty".into());
        }
        if self.k_folds < 2 {
            return Err(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if !(self.accuracy_gate > 0.0 && self.accuracy_gate <= 1.0) {
            return Err(format!("accuracy_gate must be in (0, 1], got {}", self.accuracy_gate));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.n_example_rows == 0 || self.fewshot_count == 0 {
            return Err("example row counts must be at least 1".into());
        }
        Ok(())
    }

    /// Name of the Yes/No column a detection run appends.
    pub fn detection_column(&self) -> String {
        format!("{}_is_error", self.target)
    }
}
