//! Example selection: k-means representatives for row-alone prompts and
//! nearest neighbours for few-shot prompts.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{Embedder, SignatureVector};
use crate::table::{format_rows, Table};

pub const KMEANS_MAX_ITERATIONS: usize = 50;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

/// Signature of each row's `;`-joined serialization.
pub fn row_signatures(t: &Table, embedder: &dyn Embedder) -> Vec<SignatureVector> {
    (0..t.row_count())
        .map(|r| embedder.embed(&[format_rows(t, &[r], false).as_str()]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Stops when inertia
/// improves by at most `tol` or after `max_iterations`. Empty clusters keep
/// their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iterations: usize, tol: f64) -> KMeansModel {
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // Fewer distinct points than clusters.
            Err(_) => rng.gen_range(0..points.len()),
        };
        centroids.push(points[next].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let dims = points[0].len();
    let mut assignment = vec![0; points.len()];
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..max_iterations {
        let mut inertia = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, d) = nearest(&centroids, p);
            *a = c;
            inertia += d;
        }
        let converged = history.last().is_some_and(|&prev| prev - inertia <= tol);
        history.push(inertia);
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansModel {
        k,
        centroids,
        assignment,
        inertia,
        inertia_history: history,
    }
}

/// One actual row per non-empty cluster: the row nearest its centroid (ties
/// to the smaller index), deduplicated. All rows when `count >= rows`.
pub fn select_diverse_samples(signatures: &[SignatureVector], count: usize, seed: u64) -> Vec<usize> {
    let count = count.max(1);
    if signatures.len() <= count {
        return (0..signatures.len()).collect();
    }
    let points: Vec<Vec<f64>> = signatures.iter().map(|s| s.values.clone()).collect();
    let model = kmeans(&points, count, seed, KMEANS_MAX_ITERATIONS, KMEANS_TOLERANCE);
    let mut picked = Vec::with_capacity(count);
    for c in 0..count {
        if !model.assignment.contains(&c) {
            continue;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &model.centroids[c]);
            if d < best.1 {
                best = (i, d);
            }
        }
        if !picked.contains(&best.0) {
            picked.push(best.0);
        }
    }
    picked
}

/// Rows most similar to `query` by cosine, excluding `exclude`; ties go to
/// the smaller index.
pub fn nearest_rows(
    signatures: &[SignatureVector],
    query: &SignatureVector,
    exclude: Option<usize>,
    count: usize,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = signatures
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, s)| (i, s.cosine(query)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(count).map(|(i, _)| i).collect()
}

/// The `count` rows of G most similar to row `r`, excluding `r` itself.
pub fn select_fewshot_examples(signatures: &[SignatureVector], r: usize, count: usize) -> Vec<usize> {
    nearest_rows(signatures, &signatures[r], Some(r), count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::HashingEmbedder;

    fn three_patterns() -> Table {
        let patterns = [
            ["00:00", "00:00", "True"],
            ["09:00", "17:30", "False"],
            ["06:45", "23:15", "False"],
        ];
        let rows: Vec<Vec<Option<&str>>> = (0..300)
            .map(|i| patterns[i % 3].iter().map(|v| Some(*v)).collect())
            .collect();
        Table::from_strs("p", &["open", "close", "24h"], &rows).unwrap()
    }

    #[test]
    fn one_representative_per_pattern() {
        let t = three_patterns();
        let sigs = row_signatures(&t, &HashingEmbedder::default());
        let picked = select_diverse_samples(&sigs, 3, 1);
        let mut classes: Vec<usize> = picked.iter().map(|i| i % 3).collect();
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 1, 2]);
        assert_eq!(picked, select_diverse_samples(&sigs, 3, 1));
    }

    #[test]
    fn small_tables_return_everything() {
        let t = three_patterns().select_rows(&[0, 1]);
        let sigs = row_signatures(&t, &HashingEmbedder::default());
        assert_eq!(select_diverse_samples(&sigs, 5, 0), vec![0, 1]);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..400).map(|_| (0..6).map(|_| rng.gen::<f64>()).collect()).collect();
        for seed in 0..5 {
            let m = kmeans(&pts, 7, seed, 50, 0.0);
            assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", m.inertia_history);
            assert!(m.inertia >= 0.0);
            assert!(m.inertia <= m.inertia_history[0] + 1e-9);
        }
    }

    #[test]
    fn duplicate_ranks_first() {
        let t = Table::from_strs(
            "d",
            &["a", "b"],
            &[
                vec![Some("x"), Some("1")],
                vec![Some("yy"), Some("22")],
                vec![Some("x"), Some("1")],
                vec![Some("x"), Some("2")],
            ],
        )
        .unwrap();
        let sigs = row_signatures(&t, &HashingEmbedder::default());
        let ex = select_fewshot_examples(&sigs, 0, 2);
        assert_eq!(ex[0], 2);
        assert_eq!(select_fewshot_examples(&sigs, 0, 10).len(), 3);
    }
}
