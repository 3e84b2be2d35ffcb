//! NDCG@K evaluation against true relevance labels.
//!
//! Gains are `2^label - 1`, rank discounts `1 / log2(rank + 1)`. A query
//! whose labels are all zero has IDCG = 0 and scores NDCG 1.0 by convention,
//! so degenerate queries cannot drag the mean around.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Query, QueryId};
use crate::error::{CltrError, Result};
use crate::policy::{pl, RankingPolicy};
use crate::rng::{self, labels};

/// Evaluation mode for a stochastic policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Rank by descending score, doc id as tiebreak.
    Greedy,
    /// Average NDCG over sampled rankings.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unweighted mean of the per-query values.
    pub ndcg_at_k: f64,
    pub mode: EvalMode,
    pub k: usize,
    pub per_query: BTreeMap<QueryId, f64>,
    /// Samples per query in expected mode; 0 in greedy mode.
    pub mc_samples: usize,
}

fn gain(label: u8) -> f64 {
    2f64.powi(i32::from(label)) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank as f64) + 1.0).log2()
}

fn dcg_of_prefix(query: &Query, prefix: &[u32], k: usize) -> f64 {
    prefix
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &d)| gain(query.documents[d as usize].relevance_label) * discount(pos + 1))
        .sum()
}

fn ideal_dcg(query: &Query, k: usize) -> f64 {
    let mut labels: Vec<u8> = query.documents.iter().map(|d| d.relevance_label).collect();
    labels.sort_unstable_by(|a, b| b.cmp(a));
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos, &l)| gain(l) * discount(pos + 1))
        .sum()
}

/// Greedy document order: descending score, ascending doc id on ties.
pub fn greedy_order(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

/// NDCG@k of a policy over a labeled dataset.
pub fn ndcg_at_k(
    policy: &RankingPolicy,
    dataset: &Dataset,
    k: usize,
    mode: EvalMode,
    mc_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if k < 1 {
        return Err(CltrError::Domain("k must be >= 1".into()));
    }
    if mode == EvalMode::Expected && mc_samples == 0 {
        return Err(CltrError::Domain("expected mode needs mc_samples >= 1".into()));
    }
    let mut per_query = BTreeMap::new();
    for (qi, query) in dataset.queries.iter().enumerate() {
        let idcg = ideal_dcg(query, k);
        let value = if idcg == 0.0 {
            1.0
        } else {
            match mode {
                EvalMode::Greedy => {
                    let scores = crate::policy::score_documents(&policy.scorer, query)?;
                    dcg_of_prefix(query, &greedy_order(&scores), k) / idcg
                }
                EvalMode::Expected => {
                    let scaled = policy.scaled_scores(query)?;
                    let draw_len = policy.display_len(query).min(k.min(query.n_docs()));
                    let mut rng = rng::substream(seed, labels::EVAL, qi as u64);
                    let mut total = 0.0;
                    for _ in 0..mc_samples {
                        let prefix = pl::sample_prefix(&scaled, draw_len, &mut rng);
                        total += dcg_of_prefix(query, &prefix, k) / idcg;
                    }
                    total / mc_samples as f64
                }
            }
        };
        per_query.insert(query.query_id, value);
    }
    let ndcg_at_k = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        ndcg_at_k,
        mode,
        k,
        per_query,
        mc_samples: if mode == EvalMode::Expected { mc_samples } else { 0 },
    })
}
