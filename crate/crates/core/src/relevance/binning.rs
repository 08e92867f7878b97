//! Feature binning into at most 255 value bins plus a reserved NULL bin.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::RelevanceError;
use crate::table::{parse_number, parse_temporal, value_frequencies, ColumnKind, ColumnProfile, Table};

/// Bin index reserved for NULL (and unparseable ordinal) cells.
pub const NULL_BIN: u8 = 255;
/// Number of value bins available to a feature (indices `0..=254`).
pub const VALUE_BINS: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureBinning {
    /// Value `v` lands in bin `#{ edge : v > edge }`.
    Ordinal { edges: Vec<f64>, temporal: bool },
    /// Most frequent values get bins `0..=253` by frequency rank; the rest
    /// share the overflow bin 254.
    Categorical { category_map: HashMap<String, u8> },
}

impl FeatureBinning {
    pub fn bin_of(&self, value: Option<&str>) -> u8 {
        let Some(v) = value else { return NULL_BIN };
        match self {
            FeatureBinning::Ordinal { edges, temporal } => {
                let x = if *temporal { parse_temporal(v) } else { parse_number(v) };
                match x {
                    Some(x) => edges.partition_point(|&e| x > e) as u8,
                    None => NULL_BIN,
                }
            }
            FeatureBinning::Categorical { category_map } => {
                category_map.get(v).copied().unwrap_or(OVERFLOW_BIN)
            }
        }
    }
}

const OVERFLOW_BIN: u8 = 254;

/// Column-major matrix of bin indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMatrix {
    pub n_rows: usize,
    pub feature_names: Vec<String>,
    pub binnings: Vec<FeatureBinning>,
    /// `bins[feature][row]`.
    pub bins: Vec<Vec<u8>>,
}

impl BinnedMatrix {
    pub fn n_features(&self) -> usize {
        self.bins.len()
    }

    pub fn row_bins(&self, row: usize) -> Vec<u8> {
        self.bins.iter().map(|f| f[row]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> BinnedMatrix {
        BinnedMatrix {
            n_rows: rows.len(),
            feature_names: self.feature_names.clone(),
            binnings: self.binnings.clone(),
            bins: self
                .bins
                .iter()
                .map(|f| rows.iter().map(|&r| f[r]).collect())
                .collect(),
        }
    }
}

pub fn bin_features(
    t: &Table,
    feature_cols: &[String],
    profiles: &[ColumnProfile],
) -> Result<BinnedMatrix, RelevanceError> {
    if feature_cols.is_empty() {
        return Err(RelevanceError::NoFeatures);
    }
    let mut binnings = Vec::with_capacity(feature_cols.len());
    let mut bins = Vec::with_capacity(feature_cols.len());
    for name in feature_cols {
        let col = t
            .column_index(name)
            .ok_or_else(|| RelevanceError::UnknownColumn(name.clone()))?;
        let profile = profiles
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| RelevanceError::UnknownColumn(name.clone()))?;
        let binning = match profile.inferred_kind {
            ColumnKind::Numeric => ordinal_binning(t, col, false),
            ColumnKind::Datetime => ordinal_binning(t, col, true),
            ColumnKind::Categorical | ColumnKind::Text => categorical_binning(t, col),
        };
        bins.push(t.column_values(col).map(|v| binning.bin_of(v)).collect());
        binnings.push(binning);
    }
    Ok(BinnedMatrix {
        n_rows: t.row_count(),
        feature_names: feature_cols.to_vec(),
        binnings,
        bins,
    })
}

fn ordinal_binning(t: &Table, col: usize, temporal: bool) -> FeatureBinning {
    let mut values: Vec<f64> = t
        .column_values(col)
        .flatten()
        .filter_map(|v| if temporal { parse_temporal(v) } else { parse_number(v) })
        .collect();
    values.sort_by(f64::total_cmp);
    FeatureBinning::Ordinal {
        edges: quantile_edges(&values),
        temporal,
    }
}

/// Bin edges for sorted values: midpoints between distinct values when they
/// fit in the value bins, otherwise deduplicated quantiles.
pub fn quantile_edges(sorted: &[f64]) -> Vec<f64> {
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    if distinct.len() <= VALUE_BINS {
        return distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..VALUE_BINS)
        .map(|i| sorted[(i * n / VALUE_BINS).min(n - 1)])
        .collect();
    edges.dedup();
    // The top edge equal to the maximum would leave the last bin empty.
    if edges.last() == sorted.last() {
        edges.pop();
    }
    edges
}

fn categorical_binning(t: &Table, col: usize) -> FeatureBinning {
    let category_map = value_frequencies(t.column_values(col))
        .into_iter()
        .take(OVERFLOW_BIN as usize)
        .enumerate()
        .map(|(i, (v, _))| (v.to_string(), i as u8))
        .collect();
    FeatureBinning::Categorical { category_map }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::profile_columns;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_column(values: Vec<Option<String>>) -> (Table, Vec<ColumnProfile>) {
        let t = Table::new("b", vec!["x".into()], values.into_iter().map(|v| vec![v]).collect())
            .unwrap();
        let p = profile_columns(&t).unwrap();
        (t, p)
    }

    #[test]
    fn constant_numeric_is_one_bin() {
        let (t, p) = single_column(vec![Some("4.5".into()); 50]);
        let m = bin_features(&t, &["x".into()], &p).unwrap();
        assert!(m.bins[0].iter().all(|&b| b == 0));
    }

    #[test]
    fn categories_keep_frequencies() {
        let mut vals = Vec::new();
        for c in 0..10 {
            for _ in 0..(c + 1) {
                vals.push(Some(format!("cat{c}")));
            }
        }
        vals.push(None);
        let (t, p) = single_column(vals);
        let m = bin_features(&t, &["x".into()], &p).unwrap();
        let mut counts = [0usize; 256];
        for &b in &m.bins[0] {
            counts[b as usize] += 1;
        }
        let used: Vec<usize> = counts[..255].iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(used, vec![10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(counts[NULL_BIN as usize], 1);
    }

    #[test]
    fn edges_strictly_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<f64> = (0..5000).map(|_| (rng.gen_range(0..400) as f64) / 3.0).collect();
        v.sort_by(f64::total_cmp);
        let e = quantile_edges(&v);
        assert!(e.len() < VALUE_BINS);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn uniform_values_fill_bins_evenly() {
        // Independent check: a value's bin equals its rank bucket among the
        // sorted sample, so each of the 255 bins holds roughly n/255 values.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let vals: Vec<Option<String>> = (0..n).map(|_| Some(format!("{:.9}", rng.gen::<f64>()))).collect();
        let (t, p) = single_column(vals);
        let m = bin_features(&t, &["x".into()], &p).unwrap();
        let mut counts = vec![0usize; 255];
        for &b in &m.bins[0] {
            counts[b as usize] += 1;
        }
        let min = *counts.iter().min().unwrap();
        let max = *counts.iter().max().unwrap();
        assert!(min > 0, "empty bin");
        assert!(max <= 3 * min, "min {min} max {max}");
        let expected = n as f64 / 255.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 254 degrees of freedom; quantile bins should sit far below the 0.999 critical value (~330).
        assert!(chi2 < 330.0, "chi2 {chi2}");
    }

    #[test]
    fn null_and_unparseable_go_to_reserved_bin() {
        let mut vals: Vec<Option<String>> = (0..100).map(|i| Some(i.to_string())).collect();
        vals.push(None);
        vals.push(Some("n/a-ish".into()));
        let (t, p) = single_column(vals);
        let m = bin_features(&t, &["x".into()], &p).unwrap();
        assert_eq!(m.bins[0][100], NULL_BIN);
        assert_eq!(m.bins[0][101], NULL_BIN);
        assert_eq!(m.bins[0][0], 0);
        assert_eq!(m.bins[0][99], 99);
    }

    #[test]
    fn no_features_is_an_error() {
        let (t, p) = single_column(vec![Some("1".into())]);
        assert!(matches!(bin_features(&t, &[], &p), Err(RelevanceError::NoFeatures)));
    }
}
