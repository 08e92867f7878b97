//! Knowledge base of reference tables and similarity-based retrieval.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hasher;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use fnv::FnvHasher;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{load_table, value_frequencies, Table, DEFAULT_NULL_TOKENS};

pub const DEFAULT_DIMS: usize = 512;
pub const DEFAULT_THRESHOLD: f64 = 0.75;
/// Distinct values sampled per column signature.
pub const SIGNATURE_SAMPLES: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_FILE: &str = ".kb-signatures.json";

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read knowledge base directory {path}: {source}")]
    Dir {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("signature cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Unit-norm embedding (or all zeros for empty input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureVector {
    pub values: Vec<f64>,
}

impl SignatureVector {
    pub fn zeros(dims: usize) -> Self {
        Self {
            values: vec![0.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Cosine similarity; zero when either side is the zero vector.
    pub fn cosine(&self, other: &SignatureVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let norms = self.norm() * other.norm();
        if norms == 0.0 {
            0.0
        } else {
            (dot / norms).clamp(-1.0, 1.0)
        }
    }
}

/// Maps a bag of strings to a signature. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> SignatureVector;
}

/// Character-trigram feature hashing with sign hashing and term-frequency weights.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dims: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dims: DEFAULT_DIMS }
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[&str]) -> SignatureVector {
        let mut v = SignatureVector::zeros(self.dims);
        for text in texts {
            let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
            for gram in padded.windows(3) {
                let mut h = FnvHasher::default();
                for c in gram {
                    h.write_u32(*c as u32);
                }
                let h = h.finish();
                let bucket = (h % self.dims as u64) as usize;
                let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                v.values[bucket] += sign;
            }
        }
        let norm = v.norm();
        if norm > 0.0 {
            v.values.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Signature of a column from its name and up to 20 distinct sample values.
pub fn embed_column(name: &str, sample_values: &[&str]) -> SignatureVector {
    embed_column_with(&HashingEmbedder::default(), name, sample_values)
}

pub fn embed_column_with(embedder: &dyn Embedder, name: &str, sample_values: &[&str]) -> SignatureVector {
    let mut seen = HashSet::new();
    let mut texts = vec![name];
    texts.extend(
        sample_values
            .iter()
            .copied()
            .filter(|v| seen.insert(*v))
            .take(SIGNATURE_SAMPLES),
    );
    if texts.iter().all(|t| t.is_empty()) {
        return SignatureVector::zeros(DEFAULT_DIMS);
    }
    embedder.embed(&texts)
}

/// Per-column signatures sampled from the most frequent distinct values, so
/// the result does not depend on row order.
pub fn column_signatures(t: &Table, embedder: &dyn Embedder) -> Vec<SignatureVector> {
    (0..t.columns().len())
        .map(|c| {
            let samples: Vec<&str> = value_frequencies(t.column_values(c))
                .into_iter()
                .take(SIGNATURE_SAMPLES)
                .map(|(v, _)| v)
                .collect();
            embed_column_with(embedder, &t.columns()[c], &samples)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: String,
    pub description: Option<String>,
    pub table: Table,
    pub column_signatures: Vec<SignatureVector>,
    /// Seconds since the Unix epoch.
    pub ingested_at: u64,
}

impl KbEntry {
    pub fn new(id: impl Into<String>, table: Table, embedder: &dyn Embedder) -> Self {
        let column_signatures = column_signatures(&table, embedder);
        Self {
            id: id.into(),
            description: None,
            table,
            column_signatures,
            ingested_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Default)]
pub struct KbIngest {
    /// Sorted by id.
    pub entries: Vec<KbEntry>,
    pub warnings: Vec<String>,
}

/// Loads every `*.csv` in `dir` as an entry named by its file stem.
/// Unreadable files are skipped with a warning.
pub fn ingest_kb(dir: &Path, embedder: &dyn Embedder) -> Result<KbIngest, KbError> {
    let read_dir = std::fs::read_dir(dir).map_err(|source| KbError::Dir {
        path: dir.display().to_string(),
        source,
    })?;
    let mut paths: Vec<_> = read_dir
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();

    let mut out = KbIngest::default();
    let descriptions = match std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
        Ok(text) => match serde_json::from_str::<BTreeMap<String, String>>(&text) {
            Ok(m) => m,
            Err(e) => {
                out.warnings.push(format!("{MANIFEST_FILE}: {e}"));
                BTreeMap::new()
            }
        },
        Err(_) => BTreeMap::new(),
    };
    for path in paths {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match load_table(&path, &DEFAULT_NULL_TOKENS) {
            Ok(table) => {
                let mut entry = KbEntry::new(id.clone(), table, embedder);
                entry.description = descriptions.get(&id).cloned();
                out.entries.push(entry);
            }
            Err(e) => {
                let msg = format!("{}: {e}", path.display());
                warn!("skipping knowledge base file {msg}");
                out.warnings.push(msg);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMatch {
    pub entry_id: String,
    pub score: f64,
    /// Query column → best-aligned entry column.
    pub column_alignment: BTreeMap<String, String>,
}

/// Mean over query columns of the best cosine against any entry column.
pub fn score_entry(query: &[(String, SignatureVector)], entry: &KbEntry) -> KbMatch {
    let mut column_alignment = BTreeMap::new();
    let mut total = 0.0;
    for (name, sig) in query {
        let best = entry
            .column_signatures
            .iter()
            .zip(entry.table.columns())
            .map(|(s, c)| (sig.cosine(s), c))
            .fold(None::<(f64, &String)>, |acc, (s, c)| match acc {
                Some((bs, _)) if bs >= s => acc,
                _ => Some((s, c)),
            });
        if let Some((s, c)) = best {
            total += s;
            column_alignment.insert(name.clone(), c.clone());
        }
    }
    let score = if query.is_empty() { 0.0 } else { total / query.len() as f64 };
    KbMatch {
        entry_id: entry.id.clone(),
        score,
        column_alignment,
    }
}

/// Scores of every entry, in knowledge base order.
pub fn score_all(d_tilde: &Table, kb: &[KbEntry], embedder: &dyn Embedder) -> Vec<KbMatch> {
    let query: Vec<(String, SignatureVector)> = d_tilde
        .columns()
        .iter()
        .cloned()
        .zip(column_signatures(d_tilde, embedder))
        .collect();
    kb.iter().map(|e| score_entry(&query, e)).collect()
}

/// Best-scoring entry when its score strictly exceeds `threshold`; ties go to
/// the lexicographically smaller id.
pub fn retrieve_reference(
    d_tilde: &Table,
    kb: &[KbEntry],
    threshold: f64,
    embedder: &dyn Embedder,
) -> Option<KbMatch> {
    score_all(d_tilde, kb, embedder)
        .into_iter()
        .reduce(|best, m| {
            if m.score > best.score || (m.score == best.score && m.entry_id < best.entry_id) {
                m
            } else {
                best
            }
        })
        .filter(|m| m.score > threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedEntry {
    pub id: String,
    pub description: Option<String>,
    pub columns: Vec<String>,
    pub row_count: usize,
    pub ingested_at: u64,
    pub column_signatures: Vec<SignatureVector>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignatureCache {
    pub entries: Vec<CachedEntry>,
    pub warnings: Vec<String>,
}

impl SignatureCache {
    pub fn from_ingest(ingest: &KbIngest) -> Self {
        Self {
            entries: ingest
                .entries
                .iter()
                .map(|e| CachedEntry {
                    id: e.id.clone(),
                    description: e.description.clone(),
                    columns: e.table.columns().to_vec(),
                    row_count: e.table.row_count(),
                    ingested_at: e.ingested_at,
                    column_signatures: e.column_signatures.clone(),
                })
                .collect(),
            warnings: ingest.warnings.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), KbError> {
        let text = serde_json::to_string(self).map_err(|e| KbError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| KbError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// A missing cache reads as empty.
    pub fn read(path: &Path) -> Result<Self, KbError> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| KbError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(KbError::Cache {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cities() -> Vec<&'static str> {
        vec!["Paris", "Lyon", "Marseille", "Toulouse", "Nice", "Nantes", "Strasbourg", "Bordeaux"]
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = embed_column("city", &cities());
        let b = embed_column("city", &cities());
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_zero_vector() {
        let z = embed_column("", &[]);
        assert!(z.is_zero());
        assert_eq!(z.dims(), DEFAULT_DIMS);
        assert_eq!(z.cosine(&embed_column("x", &[])), 0.0);
    }

    #[test]
    fn duplicates_and_order_of_samples_ignored_beyond_distinct_set() {
        let a = embed_column("city", &["Paris", "Lyon", "Paris"]);
        let b = embed_column("city", &["Lyon", "Paris"]);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_columns_are_dissimilar() {
        let prices = ["12.50", "3.99", "149.00", "0.75", "18.20", "7.05", "64.10", "2.35"];
        let s = embed_column("city", &cities()).cosine(&embed_column("price", &prices));
        // Observed 0.02 on this fixture.
        assert!(s < 0.3, "{s}");
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        let e = HashingEmbedder::default();
        let t = Table::from_strs("d", &["city"], &[vec![Some("Paris")], vec![Some("Lyon")]]).unwrap();
        let kb = vec![KbEntry::new("b", t.clone(), &e), KbEntry::new("a", t.clone(), &e)];
        let m = retrieve_reference(&t, &kb, 0.75, &e).unwrap();
        assert_eq!(m.entry_id, "a");
        assert!(m.score > 0.99);
    }

    #[test]
    fn empty_kb_returns_none() {
        let e = HashingEmbedder::default();
        let t = Table::from_strs("d", &["city"], &[vec![Some("Paris")]]).unwrap();
        assert!(retrieve_reference(&t, &[], 0.0, &e).is_none());
    }
}
