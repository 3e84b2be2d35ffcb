//! Safe training objectives.
//!
//! Two safety mechanisms are implemented:
//!
//! * **Divergence penalties**: the empirical second-order Renyi divergence
//!   between the exposure distributions of the new and logging policies,
//!   subtracted from the IPS or DR estimate with a confidence weight. The DR
//!   variant carries the trust-bias factor `1 + max_k beta_k / alpha_k` and
//!   a `sqrt(2 Z / N)` scale; its penalty lower-bounds the true utility with
//!   probability `1 - delta`.
//! * **Proximal clipping (PRPO)**: per-document metric-weight ratios
//!   `omega / omega0` are clipped to `[eps_minus, eps_plus]` inside the
//!   reformulated DR objective, removing any incentive to move a document
//!   further than the clip range allows, regardless of how clicks behave.

use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use crate::data::QueryId;
use crate::error::{CltrError, Result};
use crate::estimate::DocReward;
use crate::simulate::BiasParams;
use crate::values::DocValues;

/// Safety mechanism selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafetyMode {
    None,
    SafeIps,
    SafeDr,
    Prpo,
}

/// Clipping schedule `delta(N)` for adaptive PRPO ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClipSchedule {
    /// `delta(N) = c`.
    Constant(f64),
    /// `delta(N) = min(1, c / N)`.
    InverseN(f64),
    /// `delta(N) = min(1, 1 / ln N)`, guarded to 1 for `N <= 2`.
    InverseLogN,
}

/// Safety configuration: confidence for the divergence penalties, clipping
/// schedule and resolved epsilons for PRPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub mode: SafetyMode,
    /// Confidence parameter in (0, 1) for the safe objectives.
    pub delta: f64,
    pub schedule: ClipSchedule,
    pub epsilon_minus: f64,
    pub epsilon_plus: f64,
}

impl SafetyConfig {
    pub fn none() -> Self {
        SafetyConfig {
            mode: SafetyMode::None,
            delta: 1.0,
            schedule: ClipSchedule::Constant(1.0),
            epsilon_minus: 1.0,
            epsilon_plus: 1.0,
        }
    }

    pub fn safe_dr(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CltrError::Config(format!("delta {delta} not in (0, 1)")));
        }
        Ok(SafetyConfig { mode: SafetyMode::SafeDr, delta, ..SafetyConfig::none() })
    }

    pub fn safe_ips(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CltrError::Config(format!("delta {delta} not in (0, 1)")));
        }
        Ok(SafetyConfig { mode: SafetyMode::SafeIps, delta, ..SafetyConfig::none() })
    }

    /// PRPO with epsilons resolved from `schedule` at log size `n`.
    pub fn prpo(schedule: ClipSchedule, n: usize) -> Result<Self> {
        let (epsilon_minus, epsilon_plus) = adaptive_epsilons(schedule, n)?;
        Ok(SafetyConfig {
            mode: SafetyMode::Prpo,
            delta: 1.0,
            schedule,
            epsilon_minus,
            epsilon_plus,
        })
    }
}

/// An empirical exposure-divergence measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Session-weighted mean of per-query `sum_d (w'(d) / w0'(d))^2 w0'(d)`;
    /// at least 1 for proper distributions.
    pub d2: f64,
    /// Session-weighted mean of per-query pre-normalization logging sums.
    pub z: f64,
    /// Total session count.
    pub n: usize,
}

/// Second-order Renyi divergence between per-query weight profiles.
///
/// Each query's weight vectors are normalized to distributions; queries are
/// averaged with their session counts. Errors if the new policy puts weight
/// on a document the logging policy never exposed.
pub fn renyi_divergence(
    new_weights: &DocValues,
    logging_weights: &DocValues,
    query_sessions: &BTreeMap<QueryId, u64>,
) -> Result<DivergenceReport> {
    let mut weighted_div = 0.0;
    let mut weighted_z = 0.0;
    let mut total_sessions = 0u64;
    for (qid, w0) in logging_weights.iter() {
        let n_q = *query_sessions
            .get(&qid)
            .ok_or_else(|| CltrError::Contract(format!("missing session count for {qid}")))?;
        let w = new_weights
            .query(qid)
            .ok_or_else(|| CltrError::Contract(format!("new weights missing query {qid}")))?;
        if w.len() != w0.len() {
            return Err(CltrError::Contract(format!("weight length mismatch for {qid}")));
        }
        let z0: f64 = w0.iter().sum();
        let zn: f64 = w.iter().sum();
        if z0 <= 0.0 || zn <= 0.0 {
            return Err(CltrError::Contract(format!("non-positive weight sum for {qid}")));
        }
        let mut div = 0.0;
        for (d, (&wn, &wl)) in w.iter().zip(w0).enumerate() {
            let wn_norm = wn / zn;
            let wl_norm = wl / z0;
            if wl_norm <= 0.0 {
                if wn_norm > 0.0 {
                    return Err(CltrError::DivergenceUndefined { query: qid.0, doc: d as u32 });
                }
                continue;
            }
            div += (wn_norm / wl_norm).powi(2) * wl_norm;
        }
        weighted_div += n_q as f64 * div;
        weighted_z += n_q as f64 * z0;
        total_sessions += n_q;
    }
    if total_sessions == 0 {
        return Err(CltrError::Contract("divergence over zero sessions".into()));
    }
    Ok(DivergenceReport {
        d2: weighted_div / total_sessions as f64,
        z: weighted_z / total_sessions as f64,
        n: total_sessions as usize,
    })
}

/// Divergence-penalized IPS objective:
/// `u_ips - sqrt((Z/N) ((1-delta)/delta) d2)`.
pub fn safe_ips_objective(u_ips: f64, divergence: &DivergenceReport, delta: f64) -> f64 {
    u_ips - safe_ips_penalty(divergence, delta)
}

/// The penalty term of [`safe_ips_objective`].
pub fn safe_ips_penalty(divergence: &DivergenceReport, delta: f64) -> f64 {
    let n = divergence.n as f64;
    (divergence.z / n * ((1.0 - delta) / delta) * divergence.d2).sqrt()
}

/// Divergence-penalized DR objective:
/// `u_dr - (1 + max_k beta_k/alpha_k) sqrt((2Z/N) ((1-delta)/delta) d2)`.
///
/// The right-hand side lower-bounds the true utility with probability
/// `1 - delta` under the trust-bias click model.
pub fn safe_dr_objective(
    u_dr: f64,
    divergence: &DivergenceReport,
    delta: f64,
    bias: &BiasParams,
) -> f64 {
    u_dr - safe_dr_penalty(divergence, delta, bias)
}

/// The penalty term of [`safe_dr_objective`].
pub fn safe_dr_penalty(divergence: &DivergenceReport, delta: f64, bias: &BiasParams) -> f64 {
    let n = divergence.n as f64;
    bias.trust_factor() * (2.0 * divergence.z / n * ((1.0 - delta) / delta) * divergence.d2).sqrt()
}

/// The PRPO clipping function:
/// `min(x, eps_plus) * r` for `r >= 0`, `max(x, eps_minus) * r` otherwise.
pub fn prpo_clip(x: f64, eps_minus: f64, eps_plus: f64, r: f64) -> f64 {
    if r >= 0.0 {
        x.min(eps_plus) * r
    } else {
        x.max(eps_minus) * r
    }
}

/// Indicator of an active PRPO gradient: 1 iff
/// `(r > 0 and x <= eps_plus) or (r < 0 and x >= eps_minus)`.
pub fn prpo_gradient_mask(x: f64, eps_minus: f64, eps_plus: f64, r: f64) -> f64 {
    if (r > 0.0 && x <= eps_plus) || (r < 0.0 && x >= eps_minus) {
        1.0
    } else {
        0.0
    }
}

/// The PRPO objective as a raw session-weighted sum:
/// `sum_q n_q sum_d f(omega/omega0, eps_minus, eps_plus, r(d|q))`.
///
/// Pairs with `omega0 = 0` are excluded (their reward is zero by
/// construction).
pub fn prpo_objective(
    omega: &DocValues,
    omega0: &DocValues,
    rewards: &DocReward,
    query_sessions: &BTreeMap<QueryId, u64>,
    eps_minus: f64,
    eps_plus: f64,
) -> Result<f64> {
    if eps_minus > eps_plus {
        return Err(CltrError::Config(format!(
            "eps_minus {eps_minus} exceeds eps_plus {eps_plus}"
        )));
    }
    let mut total = 0.0;
    for (qid, r) in rewards.r.iter() {
        let n_q = *query_sessions
            .get(&qid)
            .ok_or_else(|| CltrError::Contract(format!("missing session count for {qid}")))?
            as f64;
        let w = omega
            .query(qid)
            .ok_or_else(|| CltrError::Contract(format!("omega missing query {qid}")))?;
        let w0 = omega0
            .query(qid)
            .ok_or_else(|| CltrError::Contract(format!("omega0 missing query {qid}")))?;
        let mut per_query = 0.0;
        for d in 0..r.len() {
            if w0[d] <= 0.0 {
                continue;
            }
            per_query += prpo_clip(w[d] / w0[d], eps_minus, eps_plus, r[d]);
        }
        total += n_q * per_query;
    }
    Ok(total)
}

/// Resolve the PRPO clipping range from a schedule at log size `n`:
/// `eps_minus = delta(N)`, `eps_plus = 1 / delta(N)`.
pub fn adaptive_epsilons(schedule: ClipSchedule, n: usize) -> Result<(f64, f64)> {
    if n < 1 {
        return Err(CltrError::Domain("n must be >= 1".into()));
    }
    let delta_n = match schedule {
        ClipSchedule::Constant(c) => c,
        ClipSchedule::InverseN(c) => (c / n as f64).min(1.0),
        ClipSchedule::InverseLogN => {
            if n <= 2 {
                1.0
            } else {
                (1.0 / (n as f64).ln()).min(1.0)
            }
        }
    };
    if !(delta_n > 0.0 && delta_n <= 1.0) {
        return Err(CltrError::Config(format!("schedule produced delta(N) = {delta_n}")));
    }
    Ok((delta_n, 1.0 / delta_n))
}

/// Exhaustive PRPO analysis over all displayed prefixes of a small query.
#[derive(Debug, Clone, PartialEq)]
pub struct PrpoPermutationReport {
    /// Maximum of the PRPO objective over all orderings.
    pub best_objective: f64,
    /// Objective of the supplied logging ordering.
    pub logging_objective: f64,
    /// Utility of the logging ordering.
    pub logging_utility: f64,
    /// Minimum utility among objective maximizers (ties within 1e-12).
    pub worst_optimal_utility: f64,
    /// Maximum utility among objective maximizers.
    pub best_optimal_utility: f64,
    /// One objective-maximizing ordering (first found).
    pub best_prefix: Vec<u32>,
}

/// Search all ordered prefixes of `n_docs <= 8` documents for the PRPO
/// optimum under deterministic rankings.
///
/// `rank_weights[k]` is the metric weight of display rank `k+1` (documents
/// beyond the prefix get zero); `omega0` are the logging weights that form
/// the ratios (pairs with `omega0 = 0` are excluded); `rewards` is `r(d|q)`;
/// `gains` and `discounts` define the utility `sum_t gains[y_t] discounts[t]`
/// reported alongside; `logging_prefix` is the logging ordering.
#[allow(clippy::too_many_arguments)]
pub fn prpo_permutation_search(
    rank_weights: &[f64],
    omega0: &[f64],
    rewards: &[f64],
    gains: &[f64],
    discounts: &[f64],
    logging_prefix: &[u32],
    eps_minus: f64,
    eps_plus: f64,
) -> Result<PrpoPermutationReport> {
    let n = omega0.len();
    if rewards.len() != n || gains.len() != n {
        return Err(CltrError::Contract("reward/gain length mismatch".into()));
    }
    let len = rank_weights.len().min(n);
    // Guard on the number of ordered prefixes actually enumerated.
    let mut prefixes: u64 = 1;
    for i in 0..len {
        prefixes = prefixes.saturating_mul((n - i) as u64);
    }
    if prefixes > 1_000_000 {
        return Err(CltrError::Guard(format!(
            "permutation search would enumerate {prefixes} prefixes"
        )));
    }

    let objective_of = |prefix: &[u32]| -> f64 {
        let mut omega = vec![0.0; n];
        for (pos, &d) in prefix.iter().enumerate().take(rank_weights.len()) {
            omega[d as usize] = rank_weights[pos];
        }
        (0..n)
            .filter(|&d| omega0[d] > 0.0)
            .map(|d| prpo_clip(omega[d] / omega0[d], eps_minus, eps_plus, rewards[d]))
            .sum()
    };
    let utility_of = |prefix: &[u32]| -> f64 {
        prefix
            .iter()
            .enumerate()
            .take(discounts.len())
            .map(|(pos, &d)| gains[d as usize] * discounts[pos])
            .sum()
    };

    let mut best_objective = f64::NEG_INFINITY;
    let mut worst_optimal_utility = f64::INFINITY;
    let mut best_optimal_utility = f64::NEG_INFINITY;
    let mut best_prefix: Vec<u32> = Vec::new();

    let mut prefix: Vec<u32> = Vec::with_capacity(len);
    let mut used = vec![false; n];
    fn rec(
        n: usize,
        len: usize,
        prefix: &mut Vec<u32>,
        used: &mut Vec<bool>,
        visit: &mut impl FnMut(&[u32]),
    ) {
        if prefix.len() == len {
            visit(prefix);
            return;
        }
        for d in 0..n {
            if !used[d] {
                used[d] = true;
                prefix.push(d as u32);
                rec(n, len, prefix, used, visit);
                prefix.pop();
                used[d] = false;
            }
        }
    }
    rec(n, len, &mut prefix, &mut used, &mut |p: &[u32]| {
        let obj = objective_of(p);
        let util = utility_of(p);
        if obj > best_objective + 1e-12 {
            best_objective = obj;
            worst_optimal_utility = util;
            best_optimal_utility = util;
            best_prefix = p.to_vec();
        } else if (obj - best_objective).abs() <= 1e-12 {
            worst_optimal_utility = worst_optimal_utility.min(util);
            best_optimal_utility = best_optimal_utility.max(util);
        }
    });

    Ok(PrpoPermutationReport {
        best_objective,
        logging_objective: objective_of(logging_prefix),
        logging_utility: utility_of(logging_prefix),
        worst_optimal_utility,
        best_optimal_utility,
        best_prefix,
    })
}
