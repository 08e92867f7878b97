//! One-vs-rest logistic gradient boosting over histogram-binned features.
//!
//! Each round fits one depth-limited regression tree per class. Split search
//! accumulates gradient/hessian sums per bin and scans thresholds left to
//! right; the child with fewer rows gets a fresh histogram and its sibling is
//! derived by subtraction from the parent.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binning::{BinnedMatrix, NULL_BIN};
use super::RelevanceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    /// Fraction of rows drawn (without replacement) per tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            lambda: 1.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

/// Splits must improve the objective by more than this.
const MIN_SPLIT_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Rows with `bin <= threshold` go left; NULL always goes right.
    Split {
        feature: usize,
        threshold: u8,
        gain: f64,
        left: usize,
        right: usize,
    },
    /// Leaf value, already scaled by the learning rate.
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, bins: &[u8]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if bins[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    pub classes: Vec<String>,
    pub base_scores: Vec<f64>,
    pub learning_rate: f64,
    pub gain_per_feature: Vec<f64>,
    /// Raw per-class scores accumulated during training, `[class][row]`.
    pub training_scores: Vec<Vec<f64>>,
}

impl BoostModel {
    pub fn total_gain(&self) -> f64 {
        self.gain_per_feature.iter().sum()
    }

    pub fn raw_scores(&self, bins: &[u8]) -> Vec<f64> {
        let mut scores = self.base_scores.clone();
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                scores[c] += tree.predict_row(bins);
            }
        }
        scores
    }

    /// Predicted class index per row of a binned matrix.
    pub fn predict(&self, x: &BinnedMatrix) -> Vec<usize> {
        (0..x.n_rows)
            .map(|r| argmax(&self.raw_scores(&x.row_bins(r))))
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fits the booster. `labels[row]` is a class index into `classes`.
pub fn fit_gbdt(
    x: &BinnedMatrix,
    labels: &[usize],
    classes: &[String],
    params: &BoostParams,
) -> Result<BoostModel, RelevanceError> {
    if labels.len() != x.n_rows {
        return Err(RelevanceError::LengthMismatch {
            rows: x.n_rows,
            labels: labels.len(),
        });
    }
    let n = x.n_rows;
    let mut counts = vec![0usize; classes.len()];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(RelevanceError::SingleClass);
    }
    if n < 2 * params.min_samples_leaf.max(1) {
        return Err(RelevanceError::TooFewRows {
            rows: n,
            min_samples_leaf: params.min_samples_leaf,
        });
    }
    let base_scores: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let p = (c as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let mut scores: Vec<Vec<f64>> = base_scores.iter().map(|&b| vec![b; n]).collect();
    let mut gain_per_feature = vec![0.0; x.n_features()];
    let mut trees = Vec::with_capacity(params.rounds);
    let learner = TreeLearner { x, params };

    for round in 0..params.rounds {
        let fitted: Vec<(Tree, Vec<f64>)> = (0..classes.len())
            .into_par_iter()
            .map(|c| {
                let (grad, hess): (Vec<f64>, Vec<f64>) = scores[c]
                    .iter()
                    .zip(labels)
                    .map(|(&f, &l)| {
                        let p = sigmoid(f);
                        let y = if l == c { 1.0 } else { 0.0 };
                        (p - y, (p * (1.0 - p)).max(1e-16))
                    })
                    .unzip();
                let rows = learner.sample_rows(round, c);
                learner.fit_tree(&grad, &hess, rows)
            })
            .collect();
        let mut round_trees = Vec::with_capacity(classes.len());
        for (c, (tree, increments)) in fitted.into_iter().enumerate() {
            for node in &tree.nodes {
                if let TreeNode::Split { feature, gain, .. } = node {
                    gain_per_feature[*feature] += gain;
                }
            }
            if params.subsample < 1.0 {
                // Rows outside the sample still move through the tree.
                for (r, s) in scores[c].iter_mut().enumerate() {
                    *s += tree.predict_row(&x.row_bins(r));
                }
            } else {
                for (s, inc) in scores[c].iter_mut().zip(increments) {
                    *s += inc;
                }
            }
            round_trees.push(tree);
        }
        trees.push(round_trees);
    }

    Ok(BoostModel {
        trees,
        classes: classes.to_vec(),
        base_scores,
        learning_rate: params.learning_rate,
        gain_per_feature,
        training_scores: scores,
    })
}

#[derive(Clone, Copy, Default)]
struct BinStats {
    grad: f64,
    hess: f64,
    count: u32,
}

/// `hist[feature * 256 + bin]`.
type Histogram = Vec<BinStats>;

struct SplitChoice {
    feature: usize,
    threshold: u8,
    gain: f64,
}

struct TreeLearner<'a> {
    x: &'a BinnedMatrix,
    params: &'a BoostParams,
}

impl TreeLearner<'_> {
    fn sample_rows(&self, round: usize, class: usize) -> Vec<u32> {
        let n = self.x.n_rows;
        if self.params.subsample >= 1.0 {
            return (0..n as u32).collect();
        }
        let amount = ((n as f64 * self.params.subsample).ceil() as usize).clamp(1, n);
        let seed = self.params.seed ^ ((round as u64) << 32) ^ class as u64;
        let mut rows: Vec<u32> = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, amount)
            .into_iter()
            .map(|r| r as u32)
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Returns the tree and each row's leaf value (zero for unsampled rows).
    fn fit_tree(&self, grad: &[f64], hess: &[f64], mut rows: Vec<u32>) -> (Tree, Vec<f64>) {
        let hist = self.histogram(grad, hess, &rows);
        let mut nodes = Vec::new();
        let mut increments = vec![0.0; self.x.n_rows];
        self.grow(grad, hess, &mut rows, hist, 0, &mut nodes, &mut increments);
        (Tree { nodes }, increments)
    }

    fn histogram(&self, grad: &[f64], hess: &[f64], rows: &[u32]) -> Histogram {
        let mut hist = vec![BinStats::default(); self.x.n_features() * 256];
        for (f, bins) in self.x.bins.iter().enumerate() {
            let h = &mut hist[f * 256..(f + 1) * 256];
            for &r in rows {
                let r = r as usize;
                let b = &mut h[bins[r] as usize];
                b.grad += grad[r];
                b.hess += hess[r];
                b.count += 1;
            }
        }
        hist
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &self,
        grad: &[f64],
        hess: &[f64],
        rows: &mut [u32],
        hist: Histogram,
        depth: usize,
        nodes: &mut Vec<TreeNode>,
        increments: &mut [f64],
    ) -> usize {
        let id = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        let (g_total, h_total) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + grad[r as usize], h + hess[r as usize])
        });
        let split = if depth < self.params.max_depth {
            self.best_split(&hist, g_total, h_total, rows.len())
        } else {
            None
        };
        let Some(split) = split else {
            let value = -g_total / (h_total + self.params.lambda) * self.params.learning_rate;
            for &r in rows.iter() {
                increments[r as usize] = value;
            }
            nodes[id] = TreeNode::Leaf { value };
            return id;
        };

        let bins = &self.x.bins[split.feature];
        let (mut left, mut right): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| bins[r as usize] <= split.threshold);
        let (left_hist, right_hist) = if left.len() <= right.len() {
            let small = self.histogram(grad, hess, &left);
            let large = subtract(&hist, &small);
            (small, large)
        } else {
            let small = self.histogram(grad, hess, &right);
            let large = subtract(&hist, &small);
            (large, small)
        };
        drop(hist);
        let l = self.grow(grad, hess, &mut left, left_hist, depth + 1, nodes, increments);
        let r = self.grow(grad, hess, &mut right, right_hist, depth + 1, nodes, increments);
        nodes[id] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            gain: split.gain,
            left: l,
            right: r,
        };
        id
    }

    fn best_split(
        &self,
        hist: &Histogram,
        g_total: f64,
        h_total: f64,
        n: usize,
    ) -> Option<SplitChoice> {
        let lambda = self.params.lambda;
        let min_leaf = self.params.min_samples_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        let parent = g_total * g_total / (h_total + lambda);
        let mut best: Option<SplitChoice> = None;
        for f in 0..self.x.n_features() {
            let h = &hist[f * 256..(f + 1) * 256];
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            for t in 0..NULL_BIN {
                let b = h[t as usize];
                gl += b.grad;
                hl += b.hess;
                nl += b.count as usize;
                if b.count == 0 || nl < min_leaf {
                    continue;
                }
                let nr = n - nl;
                if nr < min_leaf {
                    break;
                }
                let (gr, hr) = (g_total - gl, h_total - hl);
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > MIN_SPLIT_GAIN && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        threshold: t,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn subtract(parent: &Histogram, child: &Histogram) -> Histogram {
    parent
        .iter()
        .zip(child)
        .map(|(p, c)| BinStats {
            grad: p.grad - c.grad,
            hess: p.hess - c.hess,
            count: p.count - c.count,
        })
        .collect()
}
