//! Off-policy utility estimators: IPS, direct method and doubly robust.
//!
//! All estimators consume the per-(query, doc) aggregates of a [`ClickLog`];
//! sums over sessions reduce to per-unique-query sums weighted by session
//! counts, which is algebraically identical to the per-session definitions
//! but costs `O(queries x docs)` per evaluation.
//!
//! The new policy enters only through its metric weights
//! `omega(d | q) = E[alpha_{k(d)} + beta_{k(d)}]`, supplied as a
//! [`DocValues`] map (exact by enumeration or Monte Carlo estimated).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QueryId};
use crate::error::{CltrError, Result};
use crate::simulate::ClickLog;
use crate::values::DocValues;

/// Predicted relevance probabilities `R_hat(d | q)` in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub r_hat: DocValues,
}

impl RegressionModel {
    pub fn from_map(r_hat: DocValues) -> Self {
        RegressionModel { r_hat }
    }

    /// Constant predictions for every (query, doc) of the given queries.
    pub fn constant(log: &ClickLog, dataset: &Dataset, value: f64) -> Self {
        let mut r_hat = DocValues::new();
        for (qid, _) in log.aggregates.sum_alpha.iter() {
            let n_docs = dataset.query(qid).map_or(0, |q| q.n_docs());
            r_hat.insert(qid, vec![value; n_docs]);
        }
        RegressionModel { r_hat }
    }
}

/// Per-document rewards `r(d | q)` for the reformulated DR objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocReward {
    pub r: DocValues,
}

/// Fit the closed-form bias-corrected CTR regression:
/// `R_hat = clamp(sum(c - beta_shown) / sum(alpha_shown), 0, 1)`,
/// falling back to 0.5 for documents never displayed.
pub fn fit_regression(log: &ClickLog) -> RegressionModel {
    let mut r_hat = DocValues::new();
    for (qid, sum_alpha) in log.aggregates.sum_alpha.iter() {
        let clicks = log.aggregates.clicks.query(qid).expect("aligned aggregates");
        let sum_beta = log.aggregates.sum_beta.query(qid).expect("aligned aggregates");
        let values = sum_alpha
            .iter()
            .zip(clicks)
            .zip(sum_beta)
            .map(|((&sa, &c), &sb)| if sa > 0.0 { ((c - sb) / sa).clamp(0.0, 1.0) } else { 0.5 })
            .collect();
        r_hat.insert(qid, values);
    }
    RegressionModel { r_hat }
}

fn doc_row<'a>(map: &'a DocValues, qid: QueryId, what: &str) -> Result<&'a [f64]> {
    map.query(qid)
        .ok_or_else(|| CltrError::Contract(format!("{what} map missing query {qid}")))
}

/// Policy-aware IPS estimate: `(1/N) sum_i sum_d (omega_i(d) / rho0(d)) c_i(d)`.
pub fn ips_utility(log: &ClickLog, omega: &DocValues, rho0_clipped: &DocValues) -> Result<f64> {
    let mut total = 0.0;
    for (qid, clicks) in log.aggregates.clicks.iter() {
        let w = doc_row(omega, qid, "omega")?;
        let rho = doc_row(rho0_clipped, qid, "rho0")?;
        for (d, &c) in clicks.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            if rho[d] <= 0.0 {
                return Err(CltrError::Contract(format!(
                    "zero propensity for clicked doc {d} of query {qid}; clip first"
                )));
            }
            total += w[d] / rho[d] * c;
        }
    }
    Ok(total / log.n as f64)
}

/// Direct-method estimate: `(1/N) sum_i sum_d omega_i(d) R_hat_i(d)`,
/// computed as the session-count-weighted query average.
pub fn dm_utility(log: &ClickLog, omega: &DocValues, regression: &RegressionModel) -> Result<f64> {
    let mut total = 0.0;
    for (&qid, &n_q) in log.query_sessions() {
        let w = doc_row(omega, qid, "omega")?;
        let r = doc_row(&regression.r_hat, qid, "regression")?;
        let per_query: f64 = w.iter().zip(r).map(|(&wv, &rv)| wv * rv).sum();
        total += n_q as f64 * per_query;
    }
    Ok(total / log.n as f64)
}

/// Doubly-robust estimate: the direct method plus the IPS correction of the
/// regression residuals. Undisplayed documents contribute nothing to the
/// correction (their click, alpha and beta are all zero beyond the top-K).
pub fn dr_utility(
    log: &ClickLog,
    omega: &DocValues,
    rho0_clipped: &DocValues,
    regression: &RegressionModel,
) -> Result<f64> {
    let dm = dm_utility(log, omega, regression)?;
    let mut correction = 0.0;
    for (qid, clicks) in log.aggregates.clicks.iter() {
        let w = doc_row(omega, qid, "omega")?;
        let rho = doc_row(rho0_clipped, qid, "rho0")?;
        let r = doc_row(&regression.r_hat, qid, "regression")?;
        let sum_alpha = log.aggregates.sum_alpha.query(qid).expect("aligned aggregates");
        let sum_beta = log.aggregates.sum_beta.query(qid).expect("aligned aggregates");
        for d in 0..clicks.len() {
            if sum_alpha[d] == 0.0 && clicks[d] == 0.0 {
                continue; // never displayed
            }
            if rho[d] <= 0.0 {
                return Err(CltrError::Contract(format!(
                    "zero propensity for displayed doc {d} of query {qid}; clip first"
                )));
            }
            let residual = clicks[d] - r[d] * sum_alpha[d] - sum_beta[d];
            correction += w[d] / rho[d] * residual;
        }
    }
    Ok(dm + correction / log.n as f64)
}

/// Per-document rewards for the reformulated DR objective:
/// `r(d|q) = omega0 * R_hat + (omega0 / rho0) * mean_i(c_i - alpha_k R_hat - beta_k)`
/// where the mean runs over that query's sessions (undisplayed sessions
/// contribute zero to the residual).
pub fn per_doc_reward(
    log: &ClickLog,
    regression: &RegressionModel,
    omega0: &DocValues,
    rho0_clipped: &DocValues,
) -> Result<DocReward> {
    let mut out = DocValues::new();
    for (qid, clicks) in log.aggregates.clicks.iter() {
        let n_q = log.query_sessions()[&qid] as f64;
        let w0 = doc_row(omega0, qid, "omega0")?;
        let rho = doc_row(rho0_clipped, qid, "rho0")?;
        let r = doc_row(&regression.r_hat, qid, "regression")?;
        let sum_alpha = log.aggregates.sum_alpha.query(qid).expect("aligned aggregates");
        let sum_beta = log.aggregates.sum_beta.query(qid).expect("aligned aggregates");
        let mut values = Vec::with_capacity(clicks.len());
        for d in 0..clicks.len() {
            let mut reward = w0[d] * r[d];
            if sum_alpha[d] > 0.0 || clicks[d] > 0.0 {
                if rho[d] <= 0.0 {
                    return Err(CltrError::Contract(format!(
                        "zero propensity for displayed doc {d} of query {qid}; clip first"
                    )));
                }
                let residual = clicks[d] - r[d] * sum_alpha[d] - sum_beta[d];
                reward += w0[d] / rho[d] * residual / n_q;
            }
            values.push(reward);
        }
        out.insert(qid, values);
    }
    Ok(DocReward { r: out })
}

/// The reformulated DR estimate as a raw session-weighted sum:
/// `sum_q n_q sum_d (omega(d|q) / omega0(d|q)) r(d|q)`.
///
/// Equals `N * dr_utility` when rewards, weights and propensities come from
/// the same log. Pairs with `omega0 = 0` are skipped (their reward is zero
/// by construction).
pub fn reformulated_dr_sum(
    omega: &DocValues,
    omega0: &DocValues,
    rewards: &DocReward,
    query_sessions: &BTreeMap<QueryId, u64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (qid, r) in rewards.r.iter() {
        let n_q = *query_sessions
            .get(&qid)
            .ok_or_else(|| CltrError::Contract(format!("missing session count for {qid}")))?
            as f64;
        let w = doc_row(omega, qid, "omega")?;
        let w0 = doc_row(omega0, qid, "omega0")?;
        let per_query: f64 = r
            .iter()
            .enumerate()
            .filter(|&(d, _)| w0[d] > 0.0)
            .map(|(d, &rv)| w[d] / w0[d] * rv)
            .sum();
        total += n_q * per_query;
    }
    Ok(total)
}
