//! Target-relevant column selection by gain importance of a histogram
//! gradient-boosted classifier.

pub mod binning;
pub mod gbdt;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binning::{bin_features, BinnedMatrix, FeatureBinning, NULL_BIN};
pub use gbdt::{fit_gbdt, BoostModel, BoostParams, Tree, TreeNode};

use crate::table::{profile_columns, value_frequencies, Table, TableError};

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error("no usable feature columns")]
    NoFeatures,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("target has a single class")]
    SingleClass,
    #[error("{rows} rows is fewer than twice min_samples_leaf ({min_samples_leaf})")]
    TooFewRows { rows: usize, min_samples_leaf: usize },
    #[error("{labels} labels for {rows} rows")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("target column `{0}` has no non-null values")]
    TargetAllNull(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceParams {
    pub boost: BoostParams,
    /// Selected prefix must reach this cumulative importance share.
    pub cumulative_share: f64,
    pub max_selected: usize,
    /// Targets with more labels keep the most frequent `cap - 1` plus "other".
    pub target_cardinality_cap: usize,
}

impl Default for RelevanceParams {
    fn default() -> Self {
        Self {
            boost: BoostParams::default(),
            cumulative_share: 0.90,
            max_selected: 8,
            target_cardinality_cap: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub target: String,
    /// Every non-target column with its importance share, descending.
    pub ranked: Vec<(String, f64)>,
    pub selected: Vec<String>,
    pub total_gain: f64,
}

/// Trains a booster predicting `target` from every other column and keeps
/// the smallest high-importance prefix.
pub fn select_relevant_columns(
    t: &Table,
    target: &str,
    params: &RelevanceParams,
) -> Result<RelevanceResult, RelevanceError> {
    let target_col = t
        .column_index(target)
        .ok_or_else(|| RelevanceError::UnknownColumn(target.to_string()))?;
    let features: Vec<String> = t
        .columns()
        .iter()
        .filter(|c| c.as_str() != target)
        .cloned()
        .collect();
    if features.is_empty() {
        return Err(RelevanceError::NoFeatures);
    }
    let labelled: Vec<usize> = (0..t.row_count())
        .filter(|&r| t.row(r)[target_col].is_some())
        .collect();
    if labelled.is_empty() {
        return Err(RelevanceError::TargetAllNull(target.to_string()));
    }
    let profiles = profile_columns(t)?;
    let sub = t.select_rows(&labelled);
    let (labels, classes) = encode_labels(&sub, target_col, params.target_cardinality_cap);

    let mut boost = params.boost.clone();
    boost.min_samples_leaf = boost.min_samples_leaf.min(sub.row_count() / 2).max(1);
    let gains = if classes.len() < 2 || sub.row_count() < 2 {
        vec![0.0; features.len()]
    } else {
        let x = bin_features(&sub, &features, &profiles)?;
        fit_gbdt(&x, &labels, &classes, &boost)?.gain_per_feature
    };
    let total_gain: f64 = gains.iter().sum();

    let distinct: HashMap<&str, usize> = profiles
        .iter()
        .map(|p| (p.name.as_str(), p.distinct_count))
        .collect();
    let mut ranked: Vec<(String, f64)> = features
        .iter()
        .zip(&gains)
        .map(|(f, &g)| (f.clone(), if total_gain > 0.0 { g / total_gain } else { 0.0 }))
        .collect();

    let selected = if total_gain > 0.0 {
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut cumulative = 0.0;
        let mut selected = Vec::new();
        for (name, share) in &ranked {
            if selected.len() >= params.max_selected.max(1) || *share <= 0.0 {
                break;
            }
            selected.push(name.clone());
            cumulative += share;
            if cumulative >= params.cumulative_share - 1e-12 {
                break;
            }
        }
        selected
    } else {
        ranked.sort_by(|a, b| distinct[b.0.as_str()].cmp(&distinct[a.0.as_str()]));
        ranked
            .iter()
            .take(params.max_selected.max(1))
            .map(|(n, _)| n.clone())
            .collect()
    };

    Ok(RelevanceResult {
        target: target.to_string(),
        ranked,
        selected,
        total_gain,
    })
}

fn encode_labels(t: &Table, col: usize, cap: usize) -> (Vec<usize>, Vec<String>) {
    let freq = value_frequencies(t.column_values(col));
    let keep = if freq.len() > cap { cap.saturating_sub(1) } else { freq.len() };
    let mut classes: Vec<String> = freq[..keep].iter().map(|(v, _)| v.to_string()).collect();
    let index: HashMap<&str, usize> = freq[..keep]
        .iter()
        .enumerate()
        .map(|(i, (v, _))| (*v, i))
        .collect();
    if keep < freq.len() {
        classes.push("\u{0}other".to_string());
    }
    let labels = t
        .column_values(col)
        .map(|v| index.get(v.unwrap_or_default()).copied().unwrap_or(keep))
        .collect();
    (labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_column_table_selects_other_column() {
        let rows: Vec<Vec<Option<&str>>> = (0..30)
            .map(|i| vec![Some(if i % 2 == 0 { "a" } else { "b" }), Some(if i % 2 == 0 { "x" } else { "y" })])
            .collect();
        let t = Table::from_strs("t", &["f", "y"], &rows).unwrap();
        let r = select_relevant_columns(&t, "y", &RelevanceParams::default()).unwrap();
        assert_eq!(r.selected, vec!["f"]);
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_target_falls_back_to_distinct_order() {
        let rows: Vec<Vec<Option<String>>> = (0..30)
            .map(|i| vec![Some((i % 3).to_string()), Some(i.to_string()), Some("k".into())])
            .collect();
        let t = Table::new("t", vec!["few".into(), "many".into(), "y".into()], rows).unwrap();
        let r = select_relevant_columns(&t, "y", &RelevanceParams::default()).unwrap();
        assert_eq!(r.total_gain, 0.0);
        assert_eq!(r.selected, vec!["many", "few"]);
    }

    #[test]
    fn errors() {
        let t = Table::from_strs("t", &["a", "y"], &[vec![Some("1"), None]]).unwrap();
        assert!(matches!(
            select_relevant_columns(&t, "y", &RelevanceParams::default()),
            Err(RelevanceError::TargetAllNull(_))
        ));
        assert!(matches!(
            select_relevant_columns(&t, "zz", &RelevanceParams::default()),
            Err(RelevanceError::UnknownColumn(_))
        ));
        let one = Table::from_strs("t", &["y"], &[vec![Some("1")]]).unwrap();
        assert!(matches!(
            select_relevant_columns(&one, "y", &RelevanceParams::default()),
            Err(RelevanceError::NoFeatures)
        ));
    }

    #[test]
    fn wide_targets_are_capped() {
        let rows: Vec<Vec<Option<String>>> =
            (0..200).map(|i| vec![Some(i.to_string()), Some(format!("v{}", i % 100))]).collect();
        let t = Table::new("t", vec!["a".into(), "y".into()], rows).unwrap();
        let (labels, classes) = encode_labels(&t, 1, 64);
        assert_eq!(classes.len(), 64);
        assert!(labels.iter().all(|&l| l < 64));
        assert_eq!(labels.iter().filter(|&&l| l == 63).count(), 200 - 63 * 2);
    }
}
