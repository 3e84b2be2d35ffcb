//! Plackett-Luce ranking policies over parametric scorers.
//!
//! A policy ranks a query's documents by sequential softmax sampling without
//! replacement: at every draw step the next document is picked with
//! probability proportional to `exp(score / temperature)` over the documents
//! still available, until `min(K, n_docs)` are placed. This factorized form
//! is the normative definition; Gumbel top-k sampling is provided as an
//! equivalent alternative and is checked against it statistically.
//!
//! Exposure profiles (expected per-document examination and metric weights
//! under a policy) can be computed exactly by enumerating all top-K prefixes
//! (small queries only) or by Monte Carlo.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DocId, Query, QueryId};
use crate::error::{CltrError, Result};
use crate::simulate::BiasParams;

/// Scorer families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorerKind {
    Linear,
    TwoLayer,
}

/// A parametric document scorer with a flat parameter vector.
///
/// * `Linear`: `score(x) = w . x`, `params = w` of length `feature_dim`.
/// * `TwoLayer`: `score(x) = w2 . tanh(W1 x + b1) + b2` with layout
///   `[W1 row-major (h*d), b1 (h), w2 (h), b2 (1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    kind: ScorerKind,
    feature_dim: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

impl Scorer {
    pub fn linear(feature_dim: usize) -> Self {
        Scorer { kind: ScorerKind::Linear, feature_dim, hidden_dim: 0, params: vec![0.0; feature_dim] }
    }

    pub fn two_layer(feature_dim: usize, hidden_dim: usize) -> Self {
        let n = Self::param_len(ScorerKind::TwoLayer, feature_dim, hidden_dim);
        Scorer { kind: ScorerKind::TwoLayer, feature_dim, hidden_dim, params: vec![0.0; n] }
    }

    pub fn param_len(kind: ScorerKind, feature_dim: usize, hidden_dim: usize) -> usize {
        match kind {
            ScorerKind::Linear => feature_dim,
            ScorerKind::TwoLayer => hidden_dim * feature_dim + 2 * hidden_dim + 1,
        }
    }

    pub fn from_params(
        kind: ScorerKind,
        feature_dim: usize,
        hidden_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_len(kind, feature_dim, hidden_dim);
        if params.len() != expected {
            return Err(CltrError::Contract(format!(
                "scorer parameter length {} != expected {expected}",
                params.len()
            )));
        }
        Ok(Scorer { kind, feature_dim, hidden_dim, params })
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Randomize parameters uniformly in `[-width/2, width/2]`.
    pub fn randomize<R: Rng>(&mut self, width: f64, rng: &mut R) {
        for p in &mut self.params {
            *p = width * (rng.random::<f64>() - 0.5);
        }
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim {
            return Err(CltrError::Contract(format!(
                "feature length {} != scorer dim {}",
                features.len(),
                self.feature_dim
            )));
        }
        Ok(match self.kind {
            ScorerKind::Linear => dot(&self.params, features),
            ScorerKind::TwoLayer => {
                let (w1, b1, w2, b2) = self.two_layer_views();
                let mut out = b2;
                for i in 0..self.hidden_dim {
                    let a = dot(&w1[i * self.feature_dim..(i + 1) * self.feature_dim], features) + b1[i];
                    out += w2[i] * a.tanh();
                }
                out
            }
        })
    }

    /// Accumulate `weight * d score(x) / d params` into `out`.
    pub fn accumulate_score_grad(&self, features: &[f64], weight: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.params.len());
        match self.kind {
            ScorerKind::Linear => {
                for (o, x) in out.iter_mut().zip(features) {
                    *o += weight * x;
                }
            }
            ScorerKind::TwoLayer => {
                let d = self.feature_dim;
                let h = self.hidden_dim;
                let (w1, b1, w2, _) = self.two_layer_views();
                for i in 0..h {
                    let a = dot(&w1[i * d..(i + 1) * d], features) + b1[i];
                    let t = a.tanh();
                    let dt = 1.0 - t * t;
                    let g = weight * w2[i] * dt;
                    for j in 0..d {
                        out[i * d + j] += g * features[j];
                    }
                    out[h * d + i] += g; // b1
                    out[h * d + h + i] += weight * t; // w2
                }
                out[h * d + 2 * h] += weight; // b2
            }
        }
    }

    fn two_layer_views(&self) -> (&[f64], &[f64], &[f64], f64) {
        let d = self.feature_dim;
        let h = self.hidden_dim;
        let w1 = &self.params[0..h * d];
        let b1 = &self.params[h * d..h * d + h];
        let w2 = &self.params[h * d + h..h * d + 2 * h];
        let b2 = self.params[h * d + 2 * h];
        (w1, b1, w2, b2)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score every document of a query. Linear scorers return the plain dot
/// product of parameters and features.
pub fn score_documents(scorer: &Scorer, query: &Query) -> Result<Vec<f64>> {
    query.documents.iter().map(|d| scorer.score(&d.features)).collect()
}

/// A stochastic top-K ranking policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPolicy {
    pub scorer: Scorer,
    pub top_k: usize,
    pub temperature: f64,
}

impl RankingPolicy {
    pub fn new(scorer: Scorer, top_k: usize, temperature: f64) -> Result<Self> {
        if top_k == 0 {
            return Err(CltrError::Domain("top_k must be positive".into()));
        }
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(CltrError::Domain(format!("temperature {temperature} must be positive")));
        }
        Ok(RankingPolicy { scorer, top_k, temperature })
    }

    /// Scores divided by temperature, ready for softmax sampling.
    pub fn scaled_scores(&self, query: &Query) -> Result<Vec<f64>> {
        let mut s = score_documents(&self.scorer, query)?;
        for v in &mut s {
            *v /= self.temperature;
            if !v.is_finite() {
                return Err(CltrError::Contract("non-finite score".into()));
            }
        }
        Ok(s)
    }

    /// Display length for a query: `min(top_k, n_docs)`.
    pub fn display_len(&self, query: &Query) -> usize {
        self.top_k.min(query.n_docs())
    }
}

/// A displayed ranking: an ordered prefix of a query's documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: QueryId,
    pub docs: Vec<DocId>,
}

impl Ranking {
    /// 1-based display position of a document, or `None` if not displayed.
    pub fn rank_of(&self, doc: DocId) -> Option<usize> {
        self.docs.iter().position(|d| *d == doc).map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Sequential-softmax PL primitives operating on temperature-scaled scores.
pub mod pl {
    use super::*;

    /// Draw an ordered prefix of length `min(k, n)` without replacement.
    pub fn sample_prefix<R: Rng>(scaled: &[f64], k: usize, rng: &mut R) -> Vec<u32> {
        let n = scaled.len();
        let len = k.min(n);
        let mut remaining: Vec<u32> = (0..n as u32).collect();
        let mut out = Vec::with_capacity(len);
        let mut weights = vec![0.0; n];
        for _ in 0..len {
            let mx = remaining
                .iter()
                .map(|&i| scaled[i as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (slot, &i) in remaining.iter().enumerate() {
                let w = (scaled[i as usize] - mx).exp();
                weights[slot] = w;
                total += w;
            }
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen_slot = remaining.len() - 1;
            for (slot, w) in weights[..remaining.len()].iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen_slot = slot;
                    break;
                }
            }
            out.push(remaining.swap_remove(chosen_slot));
        }
        out
    }

    /// Log-probability of an ordered prefix.
    pub fn prefix_log_prob(scaled: &[f64], prefix: &[u32]) -> f64 {
        let n = scaled.len();
        let mut available = vec![true; n];
        let mut lp = 0.0;
        for &c in prefix {
            let mx = (0..n)
                .filter(|&i| available[i])
                .map(|i| scaled[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = (0..n)
                .filter(|&i| available[i])
                .map(|i| (scaled[i] - mx).exp())
                .sum::<f64>()
                .ln()
                + mx;
            lp += scaled[c as usize] - lse;
            available[c as usize] = false;
        }
        lp
    }

    /// Accumulate `weight * d log pi(prefix) / d score_i` into `coeffs`
    /// (derivatives w.r.t. the *raw* scores, hence the 1/temperature factor).
    pub fn accumulate_log_prob_grad(
        scaled: &[f64],
        prefix: &[u32],
        temperature: f64,
        weight: f64,
        coeffs: &mut [f64],
    ) {
        let n = scaled.len();
        let inv_t = weight / temperature;
        let mut available = vec![true; n];
        for &c in prefix {
            let mx = (0..n)
                .filter(|&i| available[i])
                .map(|i| scaled[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n)
                .filter(|&i| available[i])
                .map(|i| (scaled[i] - mx).exp())
                .sum();
            for i in 0..n {
                if available[i] {
                    let p = (scaled[i] - mx).exp() / total;
                    coeffs[i] -= inv_t * p;
                }
            }
            coeffs[c as usize] += inv_t;
            available[c as usize] = false;
        }
    }

    /// Visit every ordered prefix of length `min(k, n)` with its probability.
    pub fn enumerate_prefixes(scaled: &[f64], k: usize, mut visit: impl FnMut(&[u32], f64)) {
        let n = scaled.len();
        let len = k.min(n);
        let mut prefix: Vec<u32> = Vec::with_capacity(len);
        let mut available = vec![true; n];
        fn rec(
            scaled: &[f64],
            len: usize,
            prefix: &mut Vec<u32>,
            available: &mut Vec<bool>,
            prob: f64,
            visit: &mut impl FnMut(&[u32], f64),
        ) {
            if prefix.len() == len {
                visit(prefix, prob);
                return;
            }
            let n = scaled.len();
            let mx = (0..n)
                .filter(|&i| available[i])
                .map(|i| scaled[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n)
                .filter(|&i| available[i])
                .map(|i| (scaled[i] - mx).exp())
                .sum();
            for i in 0..n {
                if available[i] {
                    let p = (scaled[i] - mx).exp() / total;
                    available[i] = false;
                    prefix.push(i as u32);
                    rec(scaled, len, prefix, available, prob * p, visit);
                    prefix.pop();
                    available[i] = true;
                }
            }
        }
        rec(scaled, len, &mut prefix, &mut available, 1.0, &mut visit);
    }
}

/// Sample a displayed ranking from the policy.
pub fn sample_ranking<R: Rng>(policy: &RankingPolicy, query: &Query, rng: &mut R) -> Result<Ranking> {
    let scaled = policy.scaled_scores(query)?;
    let prefix = pl::sample_prefix(&scaled, policy.top_k, rng);
    Ok(Ranking {
        query_id: query.query_id,
        docs: prefix.into_iter().map(DocId).collect(),
    })
}

/// Sample via Gumbel perturbation: add independent Gumbel(0,1) noise to each
/// scaled score and take the top `min(K, n)`. Distributionally identical to
/// [`sample_ranking`].
pub fn sample_ranking_gumbel<R: Rng>(
    policy: &RankingPolicy,
    query: &Query,
    rng: &mut R,
) -> Result<Ranking> {
    let scaled = policy.scaled_scores(query)?;
    let mut keyed: Vec<(f64, u32)> = scaled
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            (s - (-u.ln()).ln(), i as u32)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite keys"));
    let len = policy.display_len(query);
    Ok(Ranking {
        query_id: query.query_id,
        docs: keyed.into_iter().take(len).map(|(_, i)| DocId(i)).collect(),
    })
}

/// How to compute an exposure profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExposureMode {
    MonteCarlo,
    Enumerate,
}

/// Maximum document count for exact prefix enumeration.
pub const ENUMERATE_MAX_DOCS: usize = 8;

/// Expected per-document exposure under a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureProfile {
    /// Expected examination weight `E[alpha_{k(d)}]` per document.
    pub rho: Vec<f64>,
    /// Expected metric weight `E[alpha_{k(d)} + beta_{k(d)}]` per document.
    pub omega: Vec<f64>,
    /// `sum_{k <= display_len} alpha_k`.
    pub z_alpha: f64,
    /// `sum_{k <= display_len} (alpha_k + beta_k)`.
    pub z_omega: f64,
    /// Monte Carlo sample count; 0 for exact enumeration.
    pub n_samples: usize,
}

/// Compute the exposure profile of `policy` on `query` under `bias`.
///
/// Documents outside the displayed prefix contribute zero weight. Enumerate
/// mode is exact and guarded to `n_docs <= ENUMERATE_MAX_DOCS`.
pub fn exposure_profile(
    policy: &RankingPolicy,
    query: &Query,
    bias: &BiasParams,
    n_samples: usize,
    mode: ExposureMode,
    rng: &mut ChaCha8Rng,
) -> Result<ExposureProfile> {
    let n = query.n_docs();
    let len = policy.display_len(query).min(bias.k());
    let scaled = policy.scaled_scores(query)?;
    let mut rho = vec![0.0; n];
    let mut omega = vec![0.0; n];
    let n_samples_out = match mode {
        ExposureMode::Enumerate => {
            if n > ENUMERATE_MAX_DOCS {
                return Err(CltrError::Guard(format!(
                    "enumerate mode limited to {ENUMERATE_MAX_DOCS} docs, query has {n}"
                )));
            }
            pl::enumerate_prefixes(&scaled, len, |prefix, prob| {
                for (pos, &doc) in prefix.iter().enumerate() {
                    let rank = pos + 1;
                    rho[doc as usize] += prob * bias.alpha_at(rank);
                    omega[doc as usize] += prob * bias.weight_at(rank);
                }
            });
            0
        }
        ExposureMode::MonteCarlo => {
            if n_samples == 0 {
                return Err(CltrError::Domain("n_samples must be positive".into()));
            }
            for _ in 0..n_samples {
                let prefix = pl::sample_prefix(&scaled, len, rng);
                for (pos, &doc) in prefix.iter().enumerate() {
                    let rank = pos + 1;
                    rho[doc as usize] += bias.alpha_at(rank);
                    omega[doc as usize] += bias.weight_at(rank);
                }
            }
            let inv = 1.0 / n_samples as f64;
            for v in rho.iter_mut().chain(omega.iter_mut()) {
                *v *= inv;
            }
            n_samples
        }
    };
    let z_alpha = (1..=len).map(|k| bias.alpha_at(k)).sum();
    let z_omega = (1..=len).map(|k| bias.weight_at(k)).sum();
    Ok(ExposureProfile { rho, omega, z_alpha, z_omega, n_samples: n_samples_out })
}

/// Monte-Carlo REINFORCE estimate of the policy gradient for a per-document
/// reward: the average over `rankings` of
/// `(sum_{d in y} reward(d) - baseline) * grad log pi(y)`.
pub fn reinforce_gradient(
    policy: &RankingPolicy,
    query: &Query,
    rankings: &[Ranking],
    per_doc_reward: &[f64],
    baseline: f64,
) -> Result<Vec<f64>> {
    if rankings.is_empty() {
        return Err(CltrError::Contract("reinforce_gradient needs at least one ranking".into()));
    }
    if per_doc_reward.len() != query.n_docs() {
        return Err(CltrError::Contract(format!(
            "reward length {} != n_docs {}",
            per_doc_reward.len(),
            query.n_docs()
        )));
    }
    let scaled = policy.scaled_scores(query)?;
    let mut coeffs = vec![0.0; query.n_docs()];
    let inv_s = 1.0 / rankings.len() as f64;
    for ranking in rankings {
        let prefix: Vec<u32> = ranking.docs.iter().map(|d| d.0).collect();
        let reward: f64 = prefix.iter().map(|&i| per_doc_reward[i as usize]).sum();
        pl::accumulate_log_prob_grad(
            &scaled,
            &prefix,
            policy.temperature,
            inv_s * (reward - baseline),
            &mut coeffs,
        );
    }
    let mut grad = vec![0.0; policy.scorer.n_params()];
    for (doc, &c) in query.documents.iter().zip(coeffs.iter()) {
        if c != 0.0 {
            policy.scorer.accumulate_score_grad(&doc.features, c, &mut grad);
        }
    }
    Ok(grad)
}

/// DCG rank weight `1 / log2(rank + 1)` for a 1-based rank.
pub fn dcg_weight(rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(CltrError::Domain("rank must be >= 1".into()));
    }
    Ok(1.0 / ((rank as f64) + 1.0).log2())
}

/// Save a policy as text: a short header (kind, dims, top-k, temperature)
/// followed by the flat parameter vector.
pub fn save_policy<P: AsRef<std::path::Path>>(policy: &RankingPolicy, path: P) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(w, "cltr-scorer v1")?;
    let kind = match policy.scorer.kind() {
        ScorerKind::Linear => "linear",
        ScorerKind::TwoLayer => "two_layer",
    };
    writeln!(w, "kind={kind}")?;
    writeln!(w, "feature_dim={}", policy.scorer.feature_dim())?;
    writeln!(w, "hidden_dim={}", policy.scorer.hidden_dim())?;
    writeln!(w, "top_k={}", policy.top_k)?;
    writeln!(w, "temperature={}", policy.temperature)?;
    let params: Vec<String> = policy.scorer.params().iter().map(|p| p.to_string()).collect();
    writeln!(w, "params={}", params.join(","))?;
    Ok(())
}

/// Load a policy saved by [`save_policy`]; the round trip is bit-exact.
pub fn load_policy<P: AsRef<std::path::Path>>(path: P) -> Result<RankingPolicy> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    let parse_err = |line: usize, message: &str| CltrError::Parse {
        line,
        message: message.to_string(),
    };
    if lines.next() != Some("cltr-scorer v1") {
        return Err(parse_err(1, "bad magic"));
    }
    let mut field = |no: usize, key: &str| -> Result<String> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(&format!("{key}=")))
            .map(str::to_string)
            .ok_or_else(|| parse_err(no, &format!("expected {key}=...")))
    };
    let kind = match field(2, "kind")?.as_str() {
        "linear" => ScorerKind::Linear,
        "two_layer" => ScorerKind::TwoLayer,
        other => return Err(parse_err(2, &format!("unknown kind {other:?}"))),
    };
    let feature_dim: usize =
        field(3, "feature_dim")?.parse().map_err(|_| parse_err(3, "bad feature_dim"))?;
    let hidden_dim: usize =
        field(4, "hidden_dim")?.parse().map_err(|_| parse_err(4, "bad hidden_dim"))?;
    let top_k: usize = field(5, "top_k")?.parse().map_err(|_| parse_err(5, "bad top_k"))?;
    let temperature: f64 =
        field(6, "temperature")?.parse().map_err(|_| parse_err(6, "bad temperature"))?;
    let params: Vec<f64> = field(7, "params")?
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(7, "bad params"))?;
    let scorer = Scorer::from_params(kind, feature_dim, hidden_dim, params)?;
    RankingPolicy::new(scorer, top_k, temperature)
}
