//! Majority consensus across snippet outputs and accuracy scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output sentinel meaning "no pattern applies".
pub const UNKNOWN: &str = "Unknown";

/// Trim, case-fold, and collapse internal whitespace runs to one space.
pub fn normalize(value: &str) -> String {
    value
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// True for outputs that do not count as a vote.
pub fn is_abstention(value: &str) -> bool {
    let n = normalize(value);
    n.is_empty() || n == "unknown"
}

/// One snippet's outputs over the query rows. `None` marks a failed row.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetOutputs {
    pub fold_id: i64,
    pub validation_accuracy: f64,
    pub values: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConsensus {
    pub value: String,
    pub votes: usize,
    /// Indices of the snippets that voted for the winning value.
    pub contributing_snippets: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub per_row: BTreeMap<usize, RowConsensus>,
    pub abstained: BTreeSet<usize>,
}

impl ConsensusResult {
    pub fn value(&self, row: usize) -> Option<&str> {
        self.per_row.get(&row).map(|r| r.value.as_str())
    }
}

/// Per row, the most frequent normalized non-abstaining value wins. Ties go to
/// the value backed by the snippet with the highest validation accuracy, then
/// the lowest fold id. The emitted text is that snippet's raw output.
pub fn consensus(outputs: &[SnippetOutputs]) -> ConsensusResult {
    let n_rows = outputs.iter().map(|o| o.values.len()).max().unwrap_or(0);
    // Rank 0 is the most trusted snippet.
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by(|&a, &b| {
        outputs[b]
            .validation_accuracy
            .total_cmp(&outputs[a].validation_accuracy)
            .then(outputs[a].fold_id.cmp(&outputs[b].fold_id))
            .then(a.cmp(&b))
    });
    let mut rank = vec![0; outputs.len()];
    for (r, &s) in order.iter().enumerate() {
        rank[s] = r;
    }

    let mut result = ConsensusResult::default();
    for row in 0..n_rows {
        // normalized value -> (voters, best-ranked voter)
        let mut groups: HashMap<String, (Vec<usize>, usize)> = HashMap::new();
        for (s, out) in outputs.iter().enumerate() {
            let Some(Some(v)) = out.values.get(row) else { continue };
            if is_abstention(v) {
                continue;
            }
            let g = groups.entry(normalize(v)).or_insert_with(|| (Vec::new(), s));
            g.0.push(s);
            if rank[s] < rank[g.1] {
                g.1 = s;
            }
        }
        let winner = groups
            .into_values()
            .max_by(|a, b| a.0.len().cmp(&b.0.len()).then(rank[b.1].cmp(&rank[a.1])));
        match winner {
            Some((voters, best)) => {
                let value = outputs[best].values[row].clone().expect("voter has a value");
                result.per_row.insert(
                    row,
                    RowConsensus {
                        value,
                        votes: voters.len(),
                        contributing_snippets: voters,
                    },
                );
            }
            None => {
                result.abstained.insert(row);
            }
        }
    }
    result
}

#[derive(Debug, Error, PartialEq)]
pub enum AccuracyError {
    #[error("{predicted} predictions for {truth} truth values")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("no values to score")]
    Empty,
}

/// Fraction of positions whose normalized prediction equals the normalized
/// truth. Missing predictions never match.
pub fn compute_accuracy<P: AsRef<str>, T: AsRef<str>>(
    predicted: &[Option<P>],
    truth: &[T],
) -> Result<f64, AccuracyError> {
    if predicted.len() != truth.len() {
        return Err(AccuracyError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(AccuracyError::Empty);
    }
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(p, t)| {
            p.as_ref()
                .is_some_and(|p| normalize(p.as_ref()) == normalize(t.as_ref()))
        })
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snip(fold: i64, acc: f64, values: &[Option<&str>]) -> SnippetOutputs {
        SnippetOutputs {
            fold_id: fold,
            validation_accuracy: acc,
            values: values.iter().map(|v| v.map(str::to_string)).collect(),
        }
    }

    #[test]
    fn plurality_ignores_unknown() {
        let outs: Vec<_> = ["A", "A", "A", "B", "Unknown"]
            .iter()
            .enumerate()
            .map(|(i, v)| snip(i as i64, 0.9, &[Some(v)]))
            .collect();
        let c = consensus(&outs);
        assert_eq!(c.per_row[&0].value, "A");
        assert_eq!(c.per_row[&0].votes, 3);
        assert_eq!(c.per_row[&0].contributing_snippets, vec![0, 1, 2]);
    }

    #[test]
    fn tie_goes_to_more_accurate_snippet() {
        let c = consensus(&[snip(0, 0.95, &[Some("A")]), snip(1, 0.99, &[Some("B")])]);
        assert_eq!(c.value(0), Some("B"));
        let c = consensus(&[snip(3, 0.9, &[Some("A")]), snip(1, 0.9, &[Some("B")])]);
        assert_eq!(c.value(0), Some("B"));
    }

    #[test]
    fn all_unknown_or_failed_abstains() {
        let c = consensus(&[snip(0, 1.0, &[Some("unknown "), None]), snip(1, 1.0, &[None, Some("")])]);
        assert!(c.per_row.is_empty());
        assert_eq!(c.abstained.iter().copied().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn normalized_values_vote_together() {
        let c = consensus(&[
            snip(0, 0.5, &[Some("new  york")]),
            snip(1, 0.9, &[Some("New York")]),
            snip(2, 1.0, &[Some("Boston")]),
        ]);
        assert_eq!(c.value(0), Some("New York"));
        assert_eq!(c.per_row[&0].votes, 2);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(compute_accuracy(&[Some("a"), Some("b")], &["a", "b"]), Ok(1.0));
        assert_eq!(compute_accuracy(&[Some("ab ")], &["AB"]), Ok(1.0));
        let pred: Vec<Option<String>> = (0..100).map(|i| Some(if i < 97 { "x" } else { "y" }.to_string())).collect();
        let truth = vec!["x"; 100];
        assert_eq!(compute_accuracy(&pred, &truth), Ok(0.97));
        assert_eq!(compute_accuracy::<&str, &str>(&[None], &["x"]), Ok(0.0));
        assert!(matches!(
            compute_accuracy(&[Some("a")], &["a", "b"]),
            Err(AccuracyError::LengthMismatch { .. })
        ));
        assert_eq!(compute_accuracy::<&str, &str>(&[], &[]), Err(AccuracyError::Empty));
    }
}
