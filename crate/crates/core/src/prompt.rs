//! Prompt assembly for code generation and row-wise querying, and code
//! extraction from model responses.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::table::{format_rows, Table};
use crate::task::{Method, TaskKind, TaskSpec};

/// Name of the function every snippet defines.
pub const ENTRY_POINT: &str = "transform";
/// Upper bound on reference rows quoted from a knowledge base table.
pub const REFERENCE_SAMPLE_ROWS: usize = 50;
pub const DEFAULT_TOKEN_BUDGET: usize = 8000;

mod templates {
    pub const TASK_IMPUTE: &str = include_str!("../templates/task_impute.txt");
    pub const TASK_DETECT: &str = include_str!("../templates/task_detect.txt");
    pub const TASK_CORRECT: &str = include_str!("../templates/task_correct.txt");
    pub const FUNCTION_BEHAVIOR: &str = include_str!("../templates/function_behavior.txt");
    pub const OUTPUT_VALUE: &str = include_str!("../templates/output_value.txt");
    pub const OUTPUT_LABEL: &str = include_str!("../templates/output_label.txt");
    pub const EXAMPLE_DATA: &str = include_str!("../templates/example_data.txt");
    pub const EXAMPLE_CODE: &str = include_str!("../templates/example_code.txt");
    pub const REFERENCE_TABLE: &str = include_str!("../templates/reference_table.txt");
    pub const ROWWISE_IMPUTE: &str = include_str!("../templates/rowwise_impute.txt");
    pub const ROWWISE_DETECT: &str = include_str!("../templates/rowwise_detect.txt");
    pub const ROWWISE_CORRECT: &str = include_str!("../templates/rowwise_correct.txt");
    pub const ROWWISE_DATA: &str = include_str!("../templates/rowwise_data.txt");
}

/// Substitutes `{name}` placeholders in one pass; unknown names stay literal.
pub fn render(template: &str, vars: &HashMap<&str, &str>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        match (after[name_len..].starts_with('}'), vars.get(name)) {
            (true, Some(value)) if !name.is_empty() => {
                out.push_str(value);
                rest = &after[name_len + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionLabel {
    TaskDescription,
    FunctionBehavior,
    ExampleData,
    ExampleCode,
    ReferenceTable,
}

impl SectionLabel {
    pub fn title(self) -> &'static str {
        match self {
            SectionLabel::TaskDescription => "Task Description",
            SectionLabel::FunctionBehavior => "Function Behavior",
            SectionLabel::ExampleData => "Example Data",
            SectionLabel::ExampleCode => "Example Code",
            SectionLabel::ReferenceTable => "Reference Table",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_kind: TaskKind,
    pub sections: Vec<(SectionLabel, String)>,
    pub token_estimate: usize,
}

impl PromptBundle {
    fn new(task_kind: TaskKind, sections: Vec<(SectionLabel, String)>) -> Self {
        let mut b = Self {
            task_kind,
            sections,
            token_estimate: 0,
        };
        b.token_estimate = b.render().chars().count().div_ceil(4);
        b
    }

    pub fn labels(&self) -> Vec<SectionLabel> {
        self.sections.iter().map(|(l, _)| *l).collect()
    }

    pub fn section(&self, label: SectionLabel) -> Option<&str> {
        self.sections
            .iter()
            .find(|(l, _)| *l == label)
            .map(|(_, t)| t.as_str())
    }

    /// Text sent to the model.
    pub fn render(&self) -> String {
        self.sections
            .iter()
            .map(|(l, t)| format!("### {}\n{}", l.title(), t))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

impl fmt::Display for PromptBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A generated program and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub source: String,
    pub entry_point: String,
    /// `-1` when not produced inside a fold.
    pub fold_id: i64,
    pub iteration: usize,
    pub method: Method,
    pub validation_accuracy: Option<f64>,
}

impl Snippet {
    pub fn new(source: impl Into<String>, fold_id: i64, iteration: usize, method: Method) -> Self {
        Self {
            source: source.into(),
            entry_point: ENTRY_POINT.to_string(),
            fold_id,
            iteration,
            method,
            validation_accuracy: None,
        }
    }
}

/// Code-generation prompt. `example_rows` come from [`format_rows`] with a header.
pub fn build_prompt(
    spec: &TaskSpec,
    example_rows: &str,
    best_code: Option<&Snippet>,
    reference_sample: Option<&str>,
    iteration: usize,
) -> PromptBundle {
    let label = spec.detection_column();
    let mut vars: HashMap<&str, &str> = HashMap::new();
    vars.insert("target", &spec.target);
    vars.insert("label", &label);
    let task = match spec.task_kind {
        TaskKind::Impute => templates::TASK_IMPUTE,
        TaskKind::Detect => templates::TASK_DETECT,
        TaskKind::Correct => templates::TASK_CORRECT,
    };
    let output_rule = match spec.task_kind {
        TaskKind::Detect => render(templates::OUTPUT_LABEL, &vars),
        _ => render(templates::OUTPUT_VALUE, &vars),
    };
    vars.insert("output_rule", &output_rule);
    vars.insert("rows", example_rows);

    let mut sections = vec![
        (SectionLabel::TaskDescription, render(task, &vars)),
        (SectionLabel::FunctionBehavior, render(templates::FUNCTION_BEHAVIOR, &vars)),
        (SectionLabel::ExampleData, render(templates::EXAMPLE_DATA, &vars)),
    ];
    if let Some(best) = best_code.filter(|_| iteration > 1) {
        vars.insert("code", &best.source);
        sections.push((SectionLabel::ExampleCode, render(templates::EXAMPLE_CODE, &vars)));
    }
    if let Some(reference) = reference_sample {
        vars.insert("reference", reference);
        sections.push((SectionLabel::ReferenceTable, render(templates::REFERENCE_TABLE, &vars)));
    }
    PromptBundle::new(spec.task_kind, sections)
}

/// Prompt asking the model for a single row's answer. The query row is
/// serialized with its header; for imputation the target cell is blank.
pub fn build_rowwise_prompt(spec: &TaskSpec, t: &Table, row: usize, fewshot_rows: &str) -> PromptBundle {
    let mut query = t.select_rows(&[row]);
    if spec.task_kind == TaskKind::Impute {
        if let Some(c) = t.column_index(&spec.target) {
            query = query.with_column_values(c, vec![None]);
        }
    }
    let query = format_rows(&query, &[0], true);
    let mut vars: HashMap<&str, &str> = HashMap::new();
    vars.insert("target", &spec.target);
    vars.insert("examples", fewshot_rows);
    vars.insert("query", &query);
    let question = match spec.task_kind {
        TaskKind::Impute => templates::ROWWISE_IMPUTE,
        TaskKind::Detect => templates::ROWWISE_DETECT,
        TaskKind::Correct => templates::ROWWISE_CORRECT,
    };
    PromptBundle::new(
        spec.task_kind,
        vec![
            (SectionLabel::TaskDescription, render(question, &vars)),
            (SectionLabel::ExampleData, render(templates::ROWWISE_DATA, &vars)),
        ],
    )
}

/// First `len` rows of a reference table, header included.
pub fn reference_sample(reference: &Table, len: usize) -> String {
    let rows: Vec<usize> = (0..reference.row_count().min(len)).collect();
    format_rows(reference, &rows, true)
}

fn defines_entry_point(source: &str) -> bool {
    source.lines().any(is_entry_definition)
}

fn is_entry_definition(line: &str) -> bool {
    line.trim_start()
        .strip_prefix("def")
        .filter(|r| r.starts_with(char::is_whitespace))
        .map(str::trim_start)
        .and_then(|r| r.strip_prefix(ENTRY_POINT))
        .is_some_and(|r| r.trim_start().starts_with('('))
}

/// Extracts snippet source: the first fenced block defining `transform`, or
/// failing that, everything from the first `def transform(` line onward.
pub fn parse_code(response: &str) -> Option<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in response.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(_), true) => blocks.push(current.take().unwrap_or_default().join("\n")),
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    if let Some(block) = blocks.into_iter().find(|b| defines_entry_point(b)) {
        return Some(block);
    }
    let lines: Vec<&str> = response.lines().collect();
    let start = lines.iter().position(|l| is_entry_definition(l) && !l.starts_with(char::is_whitespace))?;
    let body: Vec<&str> = lines[start..]
        .iter()
        .copied()
        .take_while(|l| !l.trim_start().starts_with("```"))
        .collect();
    Some(body.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const RULE: &str = "def transform(row):\n    return \"x\"";

    fn spec() -> TaskSpec {
        TaskSpec::new(TaskKind::Impute, "24-Hour Service")
    }

    #[test]
    fn render_single_pass() {
        let mut v = HashMap::new();
        v.insert("a", "{b}");
        v.insert("b", "no");
        assert_eq!(render("x {a} {c} {", &v), "x {b} {c} {");
    }

    #[test]
    fn first_iteration_has_three_sections() {
        let p = build_prompt(&spec(), "a;b\n1;2", None, None, 1);
        assert_eq!(
            p.labels(),
            vec![SectionLabel::TaskDescription, SectionLabel::FunctionBehavior, SectionLabel::ExampleData]
        );
        assert!(p.section(SectionLabel::TaskDescription).unwrap().contains("24-Hour Service"));
        assert!(p.section(SectionLabel::FunctionBehavior).unwrap().contains("\"Unknown\""));
        assert!(p.section(SectionLabel::TaskDescription).unwrap().starts_with("Write a Python code"));
    }

    #[test]
    fn refinement_adds_example_code_after_data() {
        let best = Snippet::new(RULE, 0, 1, Method::RowAlone);
        let p = build_prompt(&spec(), "a;b", Some(&best), None, 2);
        assert_eq!(p.labels()[3], SectionLabel::ExampleCode);
        assert!(p.section(SectionLabel::ExampleCode).unwrap().contains(RULE));
        let p = build_prompt(&spec(), "a;b", None, None, 2);
        assert_eq!(p.labels().len(), 3);
    }

    #[test]
    fn reference_table_is_last() {
        let best = Snippet::new(RULE, 0, 1, Method::MemoryDependent);
        let p = build_prompt(&spec(), "a;b", Some(&best), Some("city;state\nParis;IDF"), 2);
        assert_eq!(p.labels().last(), Some(&SectionLabel::ReferenceTable));
        let p = build_prompt(&spec(), "a;b", None, Some("city;state"), 1);
        assert_eq!(p.labels().last(), Some(&SectionLabel::ReferenceTable));
        let labels = p.labels();
        assert!(labels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn token_estimate_is_quarter_of_chars() {
        let p = build_prompt(&spec(), "a;b", None, None, 1);
        assert_eq!(p.token_estimate, p.render().chars().count().div_ceil(4));
    }

    #[test]
    fn detect_prompts_name_the_label() {
        let s = TaskSpec::new(TaskKind::Detect, "city");
        let p = build_prompt(&s, "a", None, None, 1);
        assert!(p.section(SectionLabel::FunctionBehavior).unwrap().contains("city_is_error"));
    }

    #[test]
    fn rowwise_prompts() {
        let t = Table::from_strs("t", &["a", "y"], &[vec![Some("1"), None], vec![Some("2"), Some("k")]])
            .unwrap();
        let p = build_rowwise_prompt(&TaskSpec::new(TaskKind::Impute, "y"), &t, 0, "a;y\n2;k");
        assert!(p.render().contains("Query row:\na;y\n1;"));
        let p = build_rowwise_prompt(&TaskSpec::new(TaskKind::Detect, "y"), &t, 1, "");
        assert!(p.render().contains("exactly \"Yes\" or \"No\""));
        assert!(p.render().contains("2;k"));
    }

    #[test]
    fn parse_fenced_block() {
        let r = format!("Here you go:\n```python\n{RULE}\n```\nDone.");
        assert_eq!(parse_code(&r).as_deref(), Some(RULE));
    }

    #[test]
    fn parse_prose_is_none() {
        assert_eq!(parse_code("I cannot find a pattern."), None);
        assert_eq!(parse_code("```\nprint(1)\n```"), None);
    }

    #[test]
    fn parse_picks_block_with_transform() {
        let r = format!("```\nimport re\n```\ntext\n```python\n{RULE}\n```\n```python\ndef transform(r):\n    pass\n```");
        assert_eq!(parse_code(&r).as_deref(), Some(RULE));
    }

    #[test]
    fn parse_unfenced_definition() {
        let r = format!("Sure.\n{RULE}\n");
        assert_eq!(parse_code(&r).as_deref(), Some(RULE));
        assert_eq!(parse_code("def transformer(row): pass"), None);
    }
}
