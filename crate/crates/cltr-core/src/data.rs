//! Dataset loading and representation.
//!
//! Datasets follow the SVMLight-with-qid convention used by the public
//! learning-to-rank collections: one document per line,
//! `<label> qid:<q> <idx>:<val> ...`, consecutive lines with the same qid
//! forming one query. Relevance labels are integer grades in `0..=4`.
//!
//! A seeded synthetic generator stands in for the license-gated public
//! datasets; it produces linearly-scorable documents with graded labels so
//! that desk-scale experiments have a learnable signal and a known skyline.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CltrError, Result};
use crate::rng::{self, labels};

/// Identifier of a query, unique within a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QueryId(pub u64);

/// Identifier of a document, unique within its query (the ordinal of the
/// document in file order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DocId(pub u32);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub features: Vec<f64>,
    /// Integer grade in `0..=4`.
    pub relevance_label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: QueryId,
    /// File order, not relevance order.
    pub documents: Vec<Document>,
}

impl Query {
    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub queries: Vec<Query>,
    pub feature_dim: usize,
}

impl Dataset {
    /// Build a dataset from parts, checking the structural invariants.
    pub fn new(split: Split, queries: Vec<Query>, feature_dim: usize) -> Result<Self> {
        if queries.is_empty() {
            return Err(CltrError::EmptyDataset(format!("{split} split has no queries")));
        }
        let mut seen = BTreeSet::new();
        for q in &queries {
            if !seen.insert(q.query_id) {
                return Err(CltrError::Domain(format!("duplicate query id {}", q.query_id)));
            }
            if q.documents.is_empty() {
                return Err(CltrError::Domain(format!("query {} has no documents", q.query_id)));
            }
            let mut doc_seen = BTreeSet::new();
            for d in &q.documents {
                if !doc_seen.insert(d.doc_id) {
                    return Err(CltrError::Domain(format!(
                        "duplicate doc id {} in query {}",
                        d.doc_id, q.query_id
                    )));
                }
                if d.features.len() != feature_dim {
                    return Err(CltrError::Domain(format!(
                        "query {} doc {}: feature length {} != dataset dim {}",
                        q.query_id,
                        d.doc_id,
                        d.features.len(),
                        feature_dim
                    )));
                }
                if d.relevance_label > 4 {
                    return Err(CltrError::Domain(format!(
                        "relevance label {} out of range 0..=4",
                        d.relevance_label
                    )));
                }
            }
        }
        Ok(Dataset { split, queries, feature_dim })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn query(&self, id: QueryId) -> Option<&Query> {
        // Queries stay in load order; ids need not be sorted, so scan.
        self.queries.iter().find(|q| q.query_id == id)
    }

    /// Index of a query by id.
    pub fn query_index(&self, id: QueryId) -> Option<usize> {
        self.queries.iter().position(|q| q.query_id == id)
    }
}

/// Map a relevance grade to a relevance probability: `P(R=1) = 0.25 * label`.
pub fn relevance_probability(relevance_label: u8) -> Result<f64> {
    if relevance_label > 4 {
        return Err(CltrError::Domain(format!(
            "relevance label {relevance_label} out of range 0..=4"
        )));
    }
    Ok(0.25 * f64::from(relevance_label))
}

/// Parse an SVMLight-with-qid file into a [`Dataset`].
///
/// Feature indices are 1-based and must be strictly increasing within a
/// line; indices absent from a line are zero-filled. `feature_dim` is the
/// maximum index observed anywhere in the file.
pub fn load_ltr_dataset<P: AsRef<Path>>(path: P, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_svmlight(BufReader::new(file), split)
}

/// Parse SVMLight-with-qid from any reader. See [`load_ltr_dataset`].
pub fn parse_svmlight<R: BufRead>(reader: R, split: Split) -> Result<Dataset> {
    struct RawDoc {
        label: u8,
        pairs: Vec<(usize, f64)>,
    }
    let mut raw: Vec<(u64, RawDoc)> = Vec::new();
    let mut max_index = 0usize;

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let content = match line.split_once('#') {
            Some((before, _)) => before,
            None => line.as_str(),
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue; // blank or comment-only line
        };
        let label: i64 = label_tok.parse().map_err(|_| CltrError::Parse {
            line: line_no,
            message: format!("non-numeric label {label_tok:?}"),
        })?;
        if !(0..=4).contains(&label) {
            return Err(CltrError::Parse {
                line: line_no,
                message: format!("label {label} out of range 0..=4"),
            });
        }
        let qid_tok = tokens.next().ok_or_else(|| CltrError::Parse {
            line: line_no,
            message: "missing qid field".into(),
        })?;
        let qid: u64 = qid_tok
            .strip_prefix("qid:")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CltrError::Parse {
                line: line_no,
                message: format!("expected qid:<int>, got {qid_tok:?}"),
            })?;

        let mut pairs = Vec::new();
        let mut last_index = 0usize;
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| CltrError::Parse {
                line: line_no,
                message: format!("expected <idx>:<val>, got {tok:?}"),
            })?;
            let idx: usize = idx_s.parse().map_err(|_| CltrError::Parse {
                line: line_no,
                message: format!("non-numeric feature index {idx_s:?}"),
            })?;
            let val: f64 = val_s.parse().map_err(|_| CltrError::Parse {
                line: line_no,
                message: format!("non-numeric feature value {val_s:?}"),
            })?;
            if idx == 0 || idx <= last_index {
                return Err(CltrError::Parse {
                    line: line_no,
                    message: format!("feature index {idx} not strictly increasing"),
                });
            }
            last_index = idx;
            pairs.push((idx, val));
        }
        max_index = max_index.max(last_index);
        raw.push((qid, RawDoc { label: label as u8, pairs }));
    }

    if raw.is_empty() {
        return Err(CltrError::EmptyDataset("no document lines found".into()));
    }

    // Group consecutive same-qid lines; a qid reappearing later is an error.
    let mut queries: Vec<Query> = Vec::new();
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    for (qid, doc) in raw {
        let start_new = match queries.last() {
            Some(q) => q.query_id.0 != qid,
            None => true,
        };
        if start_new {
            if !seen.insert(qid) {
                return Err(CltrError::Domain(format!(
                    "qid {qid} appears in non-consecutive blocks"
                )));
            }
            queries.push(Query { query_id: QueryId(qid), documents: Vec::new() });
        }
        let q = queries.last_mut().expect("just pushed");
        let mut features = vec![0.0; max_index];
        for (idx, val) in doc.pairs {
            features[idx - 1] = val;
        }
        let doc_id = DocId(q.documents.len() as u32);
        q.documents.push(Document { doc_id, features, relevance_label: doc.label });
    }

    Dataset::new(split, queries, max_index)
}

/// Serialize a dataset back to SVMLight-with-qid text. Zero-valued features
/// are omitted, so a round trip is equal modulo zeros.
pub fn write_svmlight<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    for q in &dataset.queries {
        for d in &q.documents {
            write!(w, "{} qid:{}", d.relevance_label, q.query_id)?;
            for (i, v) in d.features.iter().enumerate() {
                if *v != 0.0 {
                    write!(w, " {}:{}", i + 1, v)?;
                }
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Save a dataset to a file in SVMLight-with-qid format.
pub fn save_ltr_dataset<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<()> {
    let mut file = std::fs::File::create(path.as_ref())?;
    write_svmlight(dataset, &mut file)?;
    Ok(())
}

/// Draw `ceil(fraction * n_queries)` queries without replacement,
/// deterministically for a given seed. Selected queries keep their original
/// relative order.
pub fn subsample_queries(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CltrError::Domain(format!("fraction {fraction} not in (0, 1]")));
    }
    let n = dataset.n_queries();
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(seed, labels::SUBSAMPLE, 0);
    // Fisher-Yates, then keep the first m positions.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices.into_iter().take(m).collect();
    chosen.sort_unstable();
    let queries = chosen.into_iter().map(|i| dataset.queries[i].clone()).collect();
    Dataset::new(dataset.split, queries, dataset.feature_dim)
}

/// Per-feature (min, max) bounds computed on a dataset; used for the optional
/// min-max normalization mode.
pub fn minmax_bounds(dataset: &Dataset) -> Vec<(f64, f64)> {
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dataset.feature_dim];
    for q in &dataset.queries {
        for d in &q.documents {
            for (b, v) in bounds.iter_mut().zip(&d.features) {
                b.0 = b.0.min(*v);
                b.1 = b.1.max(*v);
            }
        }
    }
    bounds
}

/// Apply min-max normalization in place. Constant features map to 0.
pub fn apply_minmax(dataset: &mut Dataset, bounds: &[(f64, f64)]) {
    for q in &mut dataset.queries {
        for d in &mut q.documents {
            for (v, (lo, hi)) in d.features.iter_mut().zip(bounds) {
                let range = hi - lo;
                *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
            }
        }
    }
}

/// Parameters for the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    /// Std-dev of the latent noise added before labels are assigned; controls
    /// how far below 1.0 the skyline lands.
    pub latent_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_queries: 200,
            validation_queries: 50,
            test_queries: 50,
            docs_per_query: 6,
            feature_dim: 10,
            latent_noise: 0.3,
            seed: 17,
        }
    }
}

/// Train/validation/test splits from one generator run.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Generate a synthetic dataset with a fixed latent linear scorer.
///
/// Features are i.i.d. standard normal; a hidden unit weight vector plus
/// noise produces a latent score; labels are the within-query latent order
/// mapped onto grades `0..=4`. Every query therefore carries the same label
/// multiset, which keeps per-query NDCG comparable.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.docs_per_query == 0 || cfg.feature_dim == 0 {
        return Err(CltrError::Config("docs_per_query and feature_dim must be positive".into()));
    }
    let mut wrng = rng::substream(cfg.seed, labels::DATAGEN, 0);
    let mut w_true = vec![0.0; cfg.feature_dim];
    for w in &mut w_true {
        *w = normal(&mut wrng);
    }
    let norm: f64 = w_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    for w in &mut w_true {
        *w /= norm.max(1e-12);
    }

    let mut next_qid = 0u64;
    let mut make_split = |split: Split, n_queries: usize, stream: u64| -> Result<Dataset> {
        let mut queries = Vec::with_capacity(n_queries);
        for qi in 0..n_queries {
            let mut qrng = rng::substream(cfg.seed, labels::DATAGEN + stream, qi as u64);
            let m = cfg.docs_per_query;
            let mut docs = Vec::with_capacity(m);
            let mut latents = Vec::with_capacity(m);
            for di in 0..m {
                let features: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut qrng)).collect();
                let latent = dot(&w_true, &features) + cfg.latent_noise * normal(&mut qrng);
                latents.push((latent, di));
                docs.push(Document {
                    doc_id: DocId(di as u32),
                    features,
                    relevance_label: 0,
                });
            }
            // Rank docs by latent (descending) and spread grades over ranks.
            latents.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite latents"));
            for (rank, &(_, di)) in latents.iter().enumerate() {
                let grade = ((m - 1 - rank) * 5) / m;
                docs[di].relevance_label = grade as u8;
            }
            queries.push(Query { query_id: QueryId(next_qid), documents: docs });
            next_qid += 1;
        }
        Dataset::new(split, queries, cfg.feature_dim)
    };

    let train = make_split(Split::Train, cfg.train_queries, 1)?;
    let validation = make_split(Split::Validation, cfg.validation_queries, 2)?;
    let test = make_split(Split::Test, cfg.test_queries, 3)?;
    Ok(SyntheticDataset { train, validation, test })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard normal via Box-Muller.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
