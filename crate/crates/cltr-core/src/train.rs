//! Policy-gradient training of PL ranking policies against counterfactual
//! objectives.
//!
//! Every objective has the shape `J(theta) = U(theta) - penalty(theta)`
//! where `U` is linear in the per-document metric weights
//! `omega_theta(d) = E[alpha_{k(d)} + beta_{k(d)}]` (IPS, DR, and the
//! reformulated clipped DR of PRPO) and the penalty, when present, is a
//! square-root divergence of the same weights. Both parts are estimated per
//! query from the same Monte-Carlo sample of rankings, and differentiated
//! with the score-function (REINFORCE) identity; the per-query mean sample
//! reward is subtracted as a control variate.
//!
//! For gradient verification the sampled rankings can be frozen: the frozen
//! objective re-weights each sample by the importance ratio
//! `pi_theta(y) / pi_theta0(y)`, making it a smooth function of `theta`
//! whose exact derivative at `theta0` is the training gradient. Central
//! finite differences of [`FrozenEval::value_at`] therefore match
//! [`FrozenEval::gradient`] to first order.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QueryId};
use crate::error::{CltrError, Result};
use crate::estimate::{fit_regression, per_doc_reward};
use crate::policy::{pl, RankingPolicy};
use crate::rng::{self, labels};
use crate::simulate::{clip_propensities, BiasParams, ClickLog};

/// Training objective selection. PRPO epsilons are resolved values (see
/// [`crate::safety::adaptive_epsilons`] for schedule-derived ranges).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Trust-bias-corrected IPS: per-document weights `(c - beta) / rho0`.
    Ips,
    /// Doubly robust: direct method plus propensity-weighted residuals.
    Dr,
    /// IPS with the exposure-divergence penalty at confidence `delta`.
    SafeIps { delta: f64 },
    /// DR with the trust-adjusted exposure-divergence penalty.
    SafeDr { delta: f64 },
    /// Clipped reformulated DR.
    Prpo { eps_minus: f64, eps_plus: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub batch_queries: usize,
    pub mc_samples_per_query: usize,
    pub seed: u64,
    /// Optional momentum coefficient; 0 disables it.
    pub momentum: f64,
    /// Track the divergence penalty in the objective but drop its gradient.
    pub detached_penalty: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Dr,
            learning_rate: 1e-2,
            max_epochs: 100,
            patience: 10,
            batch_queries: 32,
            mc_samples_per_query: 32,
            seed: 0,
            momentum: 0.0,
            detached_penalty: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(CltrError::Config("learning_rate must be >= 0".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(CltrError::Config("max_epochs and patience must be positive".into()));
        }
        if self.batch_queries == 0 || self.mc_samples_per_query == 0 {
            return Err(CltrError::Config("batch_queries and mc_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_policy: RankingPolicy,
    pub epochs_run: usize,
    /// Maximum of `validation_trace`.
    pub best_validation_value: f64,
    /// Mean training objective per epoch.
    pub objective_trace: Vec<f64>,
    /// Validation objective per epoch (index 0 is the initial policy).
    pub validation_trace: Vec<f64>,
    pub stopped_early: bool,
}

/// Per-query training data distilled from a click log.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub query_id: QueryId,
    pub dataset_index: usize,
    pub n_q: f64,
    /// IPS per-document coefficients `(clicks - sum beta) / rho0`.
    pub g_ips: Vec<f64>,
    /// DR per-document coefficients `n_q R_hat + residual / rho0`.
    pub g_dr: Vec<f64>,
    /// Reformulated-DR rewards `r(d|q)` (per-session means).
    pub reward: Vec<f64>,
    /// Estimated logging metric weights (never clipped).
    pub omega0: Vec<f64>,
    /// Logging weights floored for penalty denominators.
    pub omega0_pen: Vec<f64>,
    /// Logging propensities floored for penalty denominators.
    pub rho0_pen: Vec<f64>,
}

/// A click log reduced to training form.
#[derive(Debug, Clone)]
pub struct PreparedLog {
    pub queries: Vec<PreparedQuery>,
    /// Normalizer of the objective; session count N for click logs.
    pub n_total: f64,
    pub bias: BiasParams,
}

/// Distill a click log for training (`clip = true` applies the `10/sqrt(N)`
/// propensity clipping; validation logs keep raw propensities).
pub fn prepare_log(log: &ClickLog, dataset: &Dataset, clip: bool) -> Result<PreparedLog> {
    let regression = fit_regression(log);
    let rho_div = if clip {
        clip_propensities(&log.estimated_rho0, log.n)
    } else {
        log.estimated_rho0.clone()
    };
    let rewards = per_doc_reward(log, &regression, &log.estimated_omega0, &rho_div)?;
    // Penalty denominators for never-displayed documents: the propensity-clip
    // schedule, but always strictly below every observed weight so that
    // unexposed documents stay the most expensive place to put exposure.
    let pen_floor = 10.0 / (log.n as f64).sqrt();
    let floor_for = |values: &[f64]| -> f64 {
        let min_positive = values
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        if min_positive.is_finite() {
            pen_floor.min(0.5 * min_positive)
        } else {
            pen_floor.min(1.0)
        }
    };

    let mut queries = Vec::new();
    for (qid, clicks) in log.aggregates.clicks.iter() {
        let dataset_index = dataset
            .query_index(qid)
            .ok_or_else(|| CltrError::Contract(format!("log references unknown query {qid}")))?;
        let n_q = log.query_sessions()[&qid] as f64;
        let sum_alpha = log.aggregates.sum_alpha.query(qid).expect("aligned");
        let sum_beta = log.aggregates.sum_beta.query(qid).expect("aligned");
        let r_hat = regression.r_hat.query(qid).expect("aligned");
        let rho = rho_div.query(qid).expect("aligned");
        let omega0 = log.estimated_omega0.query(qid).expect("aligned");
        let reward = rewards.r.query(qid).expect("aligned");
        let rho0_raw = log.estimated_rho0.query(qid).expect("aligned");

        let n_docs = clicks.len();
        let mut g_ips = vec![0.0; n_docs];
        let mut g_dr = vec![0.0; n_docs];
        for d in 0..n_docs {
            let displayed = sum_alpha[d] > 0.0 || clicks[d] > 0.0;
            if displayed {
                if rho[d] <= 0.0 {
                    return Err(CltrError::Contract(format!(
                        "zero propensity for displayed doc {d} of {qid}"
                    )));
                }
                g_ips[d] = (clicks[d] - sum_beta[d]) / rho[d];
                g_dr[d] = (clicks[d] - r_hat[d] * sum_alpha[d] - sum_beta[d]) / rho[d];
            }
            g_dr[d] += n_q * r_hat[d];
        }
        let omega_floor = floor_for(omega0);
        let rho_floor = floor_for(rho0_raw);
        queries.push(PreparedQuery {
            query_id: qid,
            dataset_index,
            n_q,
            g_ips,
            g_dr,
            reward: reward.to_vec(),
            omega0: omega0.to_vec(),
            omega0_pen: omega0.iter().map(|&w| w.max(omega_floor)).collect(),
            rho0_pen: rho0_raw.iter().map(|&r| r.max(rho_floor)).collect(),
        });
    }
    Ok(PreparedLog { queries, n_total: log.n as f64, bias: log.bias.clone() })
}

/// Build full-information training data from labeled queries: the skyline
/// objective is the DR path with per-document coefficients equal to the true
/// relevance probabilities and one virtual session per query.
pub fn prepare_skyline(dataset: &Dataset, bias: &BiasParams) -> Result<PreparedLog> {
    let mut queries = Vec::new();
    for (idx, q) in dataset.queries.iter().enumerate() {
        let n_docs = q.n_docs();
        let mut g_dr = vec![0.0; n_docs];
        for (d, doc) in q.documents.iter().enumerate() {
            g_dr[d] = crate::data::relevance_probability(doc.relevance_label)?;
        }
        queries.push(PreparedQuery {
            query_id: q.query_id,
            dataset_index: idx,
            n_q: 1.0,
            g_ips: vec![0.0; n_docs],
            g_dr,
            reward: vec![0.0; n_docs],
            omega0: vec![0.0; n_docs],
            omega0_pen: vec![1.0; n_docs],
            rho0_pen: vec![1.0; n_docs],
        });
    }
    Ok(PreparedLog {
        queries,
        n_total: dataset.n_queries() as f64,
        bias: bias.clone(),
    })
}

/// Sampled rankings for one query, with the log-probabilities they had under
/// the policy that drew them.
#[derive(Debug, Clone)]
pub struct QuerySamples {
    pub prefixes: Vec<Vec<u32>>,
    pub base_log_probs: Vec<f64>,
}

/// One sample set per batch entry.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub per_query: Vec<QuerySamples>,
}

/// Draw `s` rankings per batch query from the current policy.
pub fn draw_samples(
    policy: &RankingPolicy,
    dataset: &Dataset,
    prepared: &PreparedLog,
    batch: &[usize],
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleSet> {
    let mut per_query = Vec::with_capacity(batch.len());
    for &qi in batch {
        let pq = &prepared.queries[qi];
        let query = &dataset.queries[pq.dataset_index];
        let scaled = policy.scaled_scores(query)?;
        let len = display_len(policy, query.n_docs(), &prepared.bias);
        let mut prefixes = Vec::with_capacity(s);
        let mut base_log_probs = Vec::with_capacity(s);
        for _ in 0..s {
            let prefix = pl::sample_prefix(&scaled, len, rng);
            base_log_probs.push(pl::prefix_log_prob(&scaled, &prefix));
            prefixes.push(prefix);
        }
        per_query.push(QuerySamples { prefixes, base_log_probs });
    }
    Ok(SampleSet { per_query })
}

fn display_len(policy: &RankingPolicy, n_docs: usize, bias: &BiasParams) -> usize {
    policy.top_k.min(n_docs).min(bias.k())
}

struct EvalOutput {
    value: f64,
    grad: Option<Vec<f64>>,
}

/// Evaluate (and optionally differentiate) the objective over a batch.
///
/// `baselines`, when given, are frozen per-query control variates; otherwise
/// the per-query mean sample reward is used. The gradient is only valid when
/// the policy equals the one that drew `samples`.
#[allow(clippy::too_many_arguments)]
fn eval_batch(
    policy: &RankingPolicy,
    dataset: &Dataset,
    prepared: &PreparedLog,
    batch: &[usize],
    objective: ObjectiveKind,
    samples: &SampleSet,
    baselines: Option<&[f64]>,
    detached_penalty: bool,
    want_grad: bool,
) -> Result<EvalOutput> {
    let bias = &prepared.bias;
    let n_total = prepared.n_total;

    // Penalty configuration.
    enum Penalty {
        None,
        OverOmega { delta: f64 },
        OverRho { delta: f64 },
    }
    let penalty = match objective {
        ObjectiveKind::SafeDr { delta } => Penalty::OverOmega { delta },
        ObjectiveKind::SafeIps { delta } => Penalty::OverRho { delta },
        _ => Penalty::None,
    };

    struct Scratch {
        scaled: Vec<f64>,
        weights: Vec<f64>,    // importance ratios w_j
        sample_rewards: Vec<f64>,
        sample_pen: Vec<f64>, // P_j penalty statistics
        qscale: f64,
        baseline: f64,
        mean_w: f64,
        div_chain: f64,       // 2 * z0p / z^2 factor of grad div_q
    }
    let mut scratch: Vec<Scratch> = Vec::with_capacity(batch.len());

    let mut util_value = 0.0;
    let mut batch_sessions = 0.0;
    let mut weighted_div = 0.0;
    let mut weighted_z0p = 0.0;

    for (slot, &qi) in batch.iter().enumerate() {
        let pq = &prepared.queries[qi];
        let query = &dataset.queries[pq.dataset_index];
        let n_docs = query.n_docs();
        let qs = &samples.per_query[slot];
        let s = qs.prefixes.len();
        let inv_s = 1.0 / s as f64;
        let scaled = policy.scaled_scores(query)?;
        let len = display_len(policy, n_docs, bias);

        // Importance ratios and IS-weighted exposure estimates.
        let mut weights = Vec::with_capacity(s);
        let mut omega_hat = vec![0.0; n_docs];
        let mut rho_hat = vec![0.0; n_docs];
        for (j, prefix) in qs.prefixes.iter().enumerate() {
            let lp = pl::prefix_log_prob(&scaled, prefix);
            let w = (lp - qs.base_log_probs[j]).exp();
            for (pos, &d) in prefix.iter().enumerate() {
                omega_hat[d as usize] += w * bias.weight_at(pos + 1) * inv_s;
                rho_hat[d as usize] += w * bias.alpha_at(pos + 1) * inv_s;
            }
            weights.push(w);
        }
        let mean_w = weights.iter().sum::<f64>() * inv_s;

        // Per-document utility coefficients and PRPO masks.
        let (qscale, g): (f64, Vec<f64>) = match objective {
            ObjectiveKind::Ips | ObjectiveKind::SafeIps { .. } => (1.0 / n_total, pq.g_ips.clone()),
            ObjectiveKind::Dr | ObjectiveKind::SafeDr { .. } => (1.0 / n_total, pq.g_dr.clone()),
            ObjectiveKind::Prpo { eps_minus, eps_plus } => {
                let g = omega_hat
                    .iter()
                    .zip(&pq.omega0)
                    .zip(&pq.reward)
                    .map(|((&oh, &w0), &r)| {
                        if w0 > 0.0 {
                            crate::safety::prpo_gradient_mask(oh / w0, eps_minus, eps_plus, r)
                                * r
                                / w0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (pq.n_q / n_total, g)
            }
        };

        // Utility value.
        let uq = match objective {
            ObjectiveKind::Prpo { eps_minus, eps_plus } => {
                let v: f64 = omega_hat
                    .iter()
                    .zip(&pq.omega0)
                    .zip(&pq.reward)
                    .filter(|((_, &w0), _)| w0 > 0.0)
                    .map(|((&oh, &w0), &r)| {
                        crate::safety::prpo_clip(oh / w0, eps_minus, eps_plus, r)
                    })
                    .sum();
                qscale * v
            }
            _ => qscale * g.iter().zip(&omega_hat).map(|(&gv, &w)| gv * w).sum::<f64>(),
        };
        util_value += uq;

        // Per-sample utility rewards and penalty statistics.
        let mut sample_rewards = Vec::with_capacity(s);
        let mut sample_pen = Vec::with_capacity(s);
        let (div_q, div_chain, z0p) = match penalty {
            Penalty::None => (0.0, 0.0, 0.0),
            Penalty::OverOmega { .. } => {
                let z: f64 = (1..=len).map(|k| bias.weight_at(k)).sum();
                let z0p: f64 = pq.omega0_pen.iter().sum();
                let div: f64 = (0..n_docs)
                    .map(|d| omega_hat[d] * omega_hat[d] / pq.omega0_pen[d])
                    .sum::<f64>()
                    * z0p
                    / (z * z);
                (div, 2.0 * z0p / (z * z), z0p)
            }
            Penalty::OverRho { .. } => {
                let z: f64 = (1..=len).map(|k| bias.alpha_at(k)).sum();
                let z0p: f64 = pq.rho0_pen.iter().sum();
                let div: f64 = (0..n_docs)
                    .map(|d| rho_hat[d] * rho_hat[d] / pq.rho0_pen[d])
                    .sum::<f64>()
                    * z0p
                    / (z * z);
                (div, 2.0 * z0p / (z * z), z0p)
            }
        };
        for prefix in &qs.prefixes {
            let mut r_j = 0.0;
            let mut p_j = 0.0;
            for (pos, &d) in prefix.iter().enumerate() {
                let d = d as usize;
                r_j += g[d] * bias.weight_at(pos + 1);
                match penalty {
                    Penalty::None => {}
                    Penalty::OverOmega { .. } => {
                        p_j += omega_hat[d] / pq.omega0_pen[d] * bias.weight_at(pos + 1);
                    }
                    Penalty::OverRho { .. } => {
                        p_j += rho_hat[d] / pq.rho0_pen[d] * bias.alpha_at(pos + 1);
                    }
                }
            }
            sample_rewards.push(r_j);
            sample_pen.push(p_j);
        }
        let baseline = match baselines {
            Some(b) => b[slot],
            None => sample_rewards.iter().sum::<f64>() * inv_s,
        };

        batch_sessions += pq.n_q;
        weighted_div += pq.n_q * div_q;
        weighted_z0p += pq.n_q * z0p;

        scratch.push(Scratch {
            scaled,
            weights,
            sample_rewards,
            sample_pen,
            qscale,
            baseline,
            mean_w,
            div_chain,
        });
    }

    // Control-variate correction: exactly zero when the samples came from
    // the current policy, but keeps the frozen objective consistent with the
    // baseline-subtracted gradient.
    let baseline_term: f64 =
        scratch.iter().map(|sc| sc.qscale * sc.baseline * (1.0 - sc.mean_w)).sum();

    // Penalty value and chain coefficient.
    let (pen_value, pen_coeff) = match penalty {
        Penalty::None => (0.0, 0.0),
        Penalty::OverOmega { delta } | Penalty::OverRho { delta } => {
            let d2 = weighted_div / batch_sessions;
            let zbar = weighted_z0p / batch_sessions;
            let c = match penalty {
                Penalty::OverOmega { .. } => {
                    bias.trust_factor()
                        * (2.0 * zbar / n_total * ((1.0 - delta) / delta)).sqrt()
                }
                _ => (zbar / n_total * ((1.0 - delta) / delta)).sqrt(),
            };
            // Batch share of the global penalty.
            let share = batch_sessions / n_total;
            let value = share * c * d2.sqrt();
            // d(value)/d(div_q) = share * c / (2 sqrt(d2)) * (n_q / batch_sessions)
            let coeff = if d2 > 0.0 { share * c / (2.0 * d2.sqrt()) } else { 0.0 };
            (value, coeff)
        }
    };

    let value = util_value + baseline_term - pen_value;

    let grad = if want_grad {
        let mut grad = vec![0.0; policy.scorer.n_params()];
        let mut coeffs = Vec::new();
        for (slot, &qi) in batch.iter().enumerate() {
            let pq = &prepared.queries[qi];
            let query = &dataset.queries[pq.dataset_index];
            let sc = &scratch[slot];
            let s = sc.weights.len();
            let inv_s = 1.0 / s as f64;
            let pen_chain_q = if detached_penalty {
                0.0
            } else {
                pen_coeff * (pq.n_q / batch_sessions) * sc.div_chain
            };
            coeffs.clear();
            coeffs.resize(query.n_docs(), 0.0);
            for (j, prefix) in samples.per_query[slot].prefixes.iter().enumerate() {
                let gamma = sc.qscale * (sc.sample_rewards[j] - sc.baseline) * inv_s
                    - pen_chain_q * sc.sample_pen[j] * inv_s;
                if gamma != 0.0 {
                    pl::accumulate_log_prob_grad(
                        &sc.scaled,
                        prefix,
                        policy.temperature,
                        gamma,
                        &mut coeffs,
                    );
                }
            }
            for (doc, &c) in query.documents.iter().zip(coeffs.iter()) {
                if c != 0.0 {
                    policy.scorer.accumulate_score_grad(&doc.features, c, &mut grad);
                }
            }
        }
        Some(grad)
    } else {
        None
    };

    Ok(EvalOutput { value, grad })
}

/// Frozen-sample objective for gradient verification under common random
/// numbers.
pub struct FrozenEval<'a> {
    dataset: &'a Dataset,
    prepared: &'a PreparedLog,
    batch: Vec<usize>,
    samples: SampleSet,
    baselines: Vec<f64>,
    objective: ObjectiveKind,
}

/// Draw and freeze a sample set at the current policy. The whole prepared
/// log is treated as one batch.
pub fn frozen_eval<'a>(
    policy: &RankingPolicy,
    dataset: &'a Dataset,
    prepared: &'a PreparedLog,
    objective: ObjectiveKind,
    s: usize,
    seed: u64,
) -> Result<FrozenEval<'a>> {
    let batch: Vec<usize> = (0..prepared.queries.len()).collect();
    let mut rng = rng::substream(seed, labels::EPOCH, 0);
    let samples = draw_samples(policy, dataset, prepared, &batch, s, &mut rng)?;
    let mut fe =
        FrozenEval { dataset, prepared, batch, samples, baselines: Vec::new(), objective };
    fe.baselines = fe.compute_baselines()?;
    Ok(fe)
}

impl<'a> FrozenEval<'a> {
    fn compute_baselines(&self) -> Result<Vec<f64>> {
        // Baselines are the per-query mean sample rewards at theta0; rebuild
        // them through a value pass that records nothing else.
        let bias = &self.prepared.bias;
        let mut baselines = Vec::with_capacity(self.batch.len());
        for (slot, &qi) in self.batch.iter().enumerate() {
            let pq = &self.prepared.queries[qi];
            let query = &self.dataset.queries[pq.dataset_index];
            let n_docs = query.n_docs();
            let qs = &self.samples.per_query[slot];
            let s = qs.prefixes.len();
            let inv_s = 1.0 / s as f64;
            let mut omega_hat = vec![0.0; n_docs];
            for prefix in &qs.prefixes {
                for (pos, &d) in prefix.iter().enumerate() {
                    omega_hat[d as usize] += bias.weight_at(pos + 1) * inv_s;
                }
            }
            let g: Vec<f64> = match self.objective {
                ObjectiveKind::Ips | ObjectiveKind::SafeIps { .. } => pq.g_ips.clone(),
                ObjectiveKind::Dr | ObjectiveKind::SafeDr { .. } => pq.g_dr.clone(),
                ObjectiveKind::Prpo { eps_minus, eps_plus } => (0..n_docs)
                    .map(|d| {
                        if pq.omega0[d] > 0.0 {
                            let ratio = omega_hat[d] / pq.omega0[d];
                            crate::safety::prpo_gradient_mask(
                                ratio, eps_minus, eps_plus, pq.reward[d],
                            ) * pq.reward[d]
                                / pq.omega0[d]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            let mut total = 0.0;
            for prefix in &qs.prefixes {
                let r_j: f64 = prefix
                    .iter()
                    .enumerate()
                    .map(|(pos, &d)| g[d as usize] * bias.weight_at(pos + 1))
                    .sum();
                total += r_j;
            }
            baselines.push(total * inv_s);
        }
        Ok(baselines)
    }

    /// The frozen objective at an arbitrary policy (importance-reweighted
    /// plug-in value).
    pub fn value_at(&self, policy: &RankingPolicy) -> Result<f64> {
        let out = eval_batch(
            policy,
            self.dataset,
            self.prepared,
            &self.batch,
            self.objective,
            &self.samples,
            Some(&self.baselines),
            false,
            false,
        )?;
        Ok(out.value)
    }

    /// Value and exact gradient of the frozen objective at the policy that
    /// drew the samples.
    pub fn gradient(&self, policy: &RankingPolicy) -> Result<(f64, Vec<f64>)> {
        let out = eval_batch(
            policy,
            self.dataset,
            self.prepared,
            &self.batch,
            self.objective,
            &self.samples,
            Some(&self.baselines),
            false,
            true,
        )?;
        Ok((out.value, out.grad.expect("gradient requested")))
    }
}

/// Estimate the objective on a prepared log with fresh samples (used for the
/// per-epoch validation value).
pub fn estimate_objective(
    policy: &RankingPolicy,
    dataset: &Dataset,
    prepared: &PreparedLog,
    objective: ObjectiveKind,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch: Vec<usize> = (0..prepared.queries.len()).collect();
    let samples = draw_samples(policy, dataset, prepared, &batch, s, rng)?;
    let out = eval_batch(
        policy, dataset, prepared, &batch, objective, &samples, None, false, false,
    )?;
    Ok(out.value)
}

/// Gradient-ascent training with early stopping on the validation objective.
///
/// `train_data` and `validation_data` are the datasets backing the
/// respective prepared logs (they may be the same object).
pub fn train_prepared(
    init: &RankingPolicy,
    train_data: &Dataset,
    train_log: &PreparedLog,
    validation_data: &Dataset,
    validation_log: &PreparedLog,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_log.queries.is_empty() {
        return Err(CltrError::EmptyLog("no training queries".into()));
    }
    let mut policy = init.clone();
    let mut velocity = vec![0.0; policy.scorer.n_params()];

    let validate = |policy: &RankingPolicy, epoch: usize| -> Result<f64> {
        let mut rng = rng::substream(config.seed, labels::VALIDATION, epoch as u64);
        estimate_objective(
            policy,
            validation_data,
            validation_log,
            config.objective,
            config.mc_samples_per_query,
            &mut rng,
        )
    };

    let mut validation_trace = vec![validate(&policy, 0)?];
    let mut best_value = validation_trace[0];
    let mut best_params = policy.scorer.params().to_vec();
    let mut bad_epochs = 0usize;
    let mut objective_trace = Vec::new();
    let mut stopped_early = false;
    let mut epochs_run = 0;

    let n_queries = train_log.queries.len();
    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let mut rng = rng::substream(config.seed, labels::EPOCH, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n_queries).collect();
        for i in (1..n_queries).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_value = 0.0;
        for batch in order.chunks(config.batch_queries) {
            let samples = draw_samples(
                &policy,
                train_data,
                train_log,
                batch,
                config.mc_samples_per_query,
                &mut rng,
            )?;
            let out = eval_batch(
                &policy,
                train_data,
                train_log,
                batch,
                config.objective,
                &samples,
                None,
                config.detached_penalty,
                true,
            )?;
            let grad = out.grad.expect("training pass requested gradient");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(CltrError::NonFiniteGradient {
                    epoch,
                    detail: "batch gradient".into(),
                });
            }
            epoch_value += out.value;
            let params = policy.scorer.params_mut();
            if config.momentum > 0.0 {
                for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = config.momentum * *v + g;
                    *p += config.learning_rate * *v;
                }
            } else {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p += config.learning_rate * g;
                }
            }
        }
        objective_trace.push(epoch_value);

        let val = validate(&policy, epoch + 1)?;
        validation_trace.push(val);
        if val > best_value {
            best_value = val;
            best_params = policy.scorer.params().to_vec();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    policy.scorer.params_mut().copy_from_slice(&best_params);
    Ok(TrainReport {
        final_policy: policy,
        epochs_run,
        best_validation_value: best_value,
        objective_trace,
        validation_trace,
        stopped_early,
    })
}

/// Train against a click log with early stopping on validation clicks.
pub fn train_policy(
    init: &RankingPolicy,
    log: &ClickLog,
    validation_log: &ClickLog,
    train_data: &Dataset,
    validation_data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let prepared = prepare_log(log, train_data, true)?;
    let prepared_validation = prepare_log(validation_log, validation_data, false)?;
    train_prepared(init, train_data, &prepared, validation_data, &prepared_validation, config)
}

/// Train on true relevance labels (the skyline reference), early-stopped on
/// the validation split's true utility.
pub fn train_skyline(
    init: &RankingPolicy,
    train_data: &Dataset,
    validation_data: &Dataset,
    bias: &BiasParams,
    config: &TrainConfig,
) -> Result<TrainReport> {
    let mut config = config.clone();
    config.objective = ObjectiveKind::Dr;
    let prepared = prepare_skyline(train_data, bias)?;
    let prepared_validation = prepare_skyline(validation_data, bias)?;
    train_prepared(init, train_data, &prepared, validation_data, &prepared_validation, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::policy::{RankingPolicy, Scorer};
    use crate::simulate::simulate_sessions;

    fn setup(
        n_sessions: usize,
        seed: u64,
    ) -> (Dataset, Dataset, ClickLog, ClickLog, RankingPolicy) {
        let synth = generate_synthetic(&SyntheticConfig {
            train_queries: 10,
            validation_queries: 4,
            test_queries: 4,
            docs_per_query: 4,
            feature_dim: 3,
            latent_noise: 0.2,
            seed,
        })
        .unwrap();
        let bias = BiasParams::default_trust();
        let mut scorer = Scorer::linear(3);
        scorer.params_mut().copy_from_slice(&[0.6, -0.3, 0.2]);
        let logging = RankingPolicy::new(scorer, 4, 1.0).unwrap();
        let log =
            simulate_sessions(&logging, &synth.train, &bias, n_sessions, false, seed).unwrap();
        let vlog = simulate_sessions(
            &logging,
            &synth.validation,
            &bias,
            (n_sessions / 5).max(1),
            false,
            seed + 1,
        )
        .unwrap();
        (synth.train, synth.validation, log, vlog, logging)
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (train, vali, log, vlog, logging) = setup(200, 3);
        let config = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            patience: 2,
            mc_samples_per_query: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train_policy(&logging, &log, &vlog, &train, &vali, &config).unwrap();
        assert_eq!(report.final_policy.scorer.params(), logging.scorer.params());
    }

    #[test]
    fn best_validation_is_trace_maximum() {
        let (train, vali, log, vlog, logging) = setup(300, 4);
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 12,
            patience: 4,
            mc_samples_per_query: 8,
            seed: 6,
            ..TrainConfig::default()
        };
        let report = train_policy(&logging, &log, &vlog, &train, &vali, &config).unwrap();
        let max = report.validation_trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((report.best_validation_value - max).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let (train, vali, log, vlog, logging) = setup(250, 7);
        let config = TrainConfig {
            learning_rate: 0.03,
            max_epochs: 5,
            patience: 5,
            mc_samples_per_query: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_policy(&logging, &log, &vlog, &train, &vali, &config).unwrap();
        let b = train_policy(&logging, &log, &vlog, &train, &vali, &config).unwrap();
        assert_eq!(a.final_policy.scorer.params(), b.final_policy.scorer.params());
        assert_eq!(a.validation_trace, b.validation_trace);
    }

    #[test]
    fn skyline_solves_separable_fixture() {
        // One clearly relevant doc per query; the trained policy should put
        // it on top with high probability.
        let synth = generate_synthetic(&SyntheticConfig {
            train_queries: 12,
            validation_queries: 4,
            test_queries: 4,
            docs_per_query: 4,
            feature_dim: 3,
            latent_noise: 0.0,
            seed: 9,
        })
        .unwrap();
        let bias = BiasParams::default_trust();
        let init = RankingPolicy::new(Scorer::linear(3), 4, 1.0).unwrap();
        let config = TrainConfig {
            learning_rate: 0.3,
            max_epochs: 120,
            patience: 120,
            mc_samples_per_query: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let report =
            train_skyline(&init, &synth.train, &synth.validation, &bias, &config).unwrap();
        let eval = crate::evaluate::ndcg_at_k(
            &report.final_policy,
            &synth.test,
            4,
            crate::evaluate::EvalMode::Greedy,
            0,
            0,
        )
        .unwrap();
        assert!(eval.ndcg_at_k > 0.9, "greedy ndcg {}", eval.ndcg_at_k);
    }

    #[test]
    fn flat_labels_leave_objective_flat() {
        let mut synth = generate_synthetic(&SyntheticConfig {
            train_queries: 6,
            validation_queries: 3,
            test_queries: 3,
            docs_per_query: 3,
            feature_dim: 2,
            latent_noise: 0.1,
            seed: 10,
        })
        .unwrap();
        for q in synth.train.queries.iter_mut().chain(synth.validation.queries.iter_mut()) {
            for d in &mut q.documents {
                d.relevance_label = 2;
            }
        }
        let bias = BiasParams::default_trust();
        let init = RankingPolicy::new(Scorer::linear(2), 3, 1.0).unwrap();
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 10,
            patience: 10,
            mc_samples_per_query: 32,
            seed: 2,
            ..TrainConfig::default()
        };
        let report =
            train_skyline(&init, &synth.train, &synth.validation, &bias, &config).unwrap();
        // Every ranking is optimal; the validation trace stays within MC noise.
        let spread = report
            .validation_trace
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            - report.validation_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.05, "spread {spread}");
    }

    #[test]
    fn control_variate_preserves_gradient_expectation() {
        // Mean gradient with and without the baseline agree within 3 sigma.
        let (train, _vali, log, _vlog, logging) = setup(200, 12);
        let prepared = prepare_log(&log, &train, true).unwrap();
        let batch: Vec<usize> = (0..prepared.queries.len()).collect();
        let n_draws = 3000;
        let dim = logging.scorer.n_params();
        let (mut sum_with, mut sum_without) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut sq_with, mut sq_without) = (vec![0.0; dim], vec![0.0; dim]);
        for draw in 0..n_draws {
            let mut rng = rng::substream(100 + draw as u64, labels::EPOCH, 0);
            let samples =
                draw_samples(&logging, &train, &prepared, &batch, 4, &mut rng).unwrap();
            let with = eval_batch(
                &logging, &train, &prepared, &batch, ObjectiveKind::Dr, &samples, None, false,
                true,
            )
            .unwrap()
            .grad
            .unwrap();
            let zeros = vec![0.0; batch.len()];
            let without = eval_batch(
                &logging,
                &train,
                &prepared,
                &batch,
                ObjectiveKind::Dr,
                &samples,
                Some(&zeros),
                false,
                true,
            )
            .unwrap()
            .grad
            .unwrap();
            for i in 0..dim {
                sum_with[i] += with[i];
                sq_with[i] += with[i] * with[i];
                sum_without[i] += without[i];
                sq_without[i] += without[i] * without[i];
            }
        }
        let n = n_draws as f64;
        for i in 0..dim {
            let mean_w = sum_with[i] / n;
            let mean_wo = sum_without[i] / n;
            let var_w = (sq_with[i] / n - mean_w * mean_w).max(0.0);
            let var_wo = (sq_without[i] / n - mean_wo * mean_wo).max(0.0);
            let sigma = ((var_w + var_wo) / n).sqrt();
            assert!(
                (mean_w - mean_wo).abs() <= 3.0 * sigma + 1e-9,
                "component {i}: {mean_w} vs {mean_wo} (sigma {sigma})"
            );
            // The baseline should not inflate variance.
            assert!(var_w <= var_wo * 1.5 + 1e-12);
        }
    }

    #[test]
    fn short_queries_survive_the_whole_pipeline() {
        // Queries with fewer documents than K are kept and displayed whole.
        use crate::data::{DocId, Document, Query, QueryId, Split};
        let mut rng = rng::substream(33, 0, 0);
        let queries: Vec<Query> = (0..6u64)
            .map(|qi| Query {
                query_id: QueryId(qi),
                documents: (0..=(qi as usize % 4))
                    .map(|di| Document {
                        doc_id: DocId(di as u32),
                        features: vec![
                            rand::Rng::random::<f64>(&mut rng) - 0.5,
                            rand::Rng::random::<f64>(&mut rng) - 0.5,
                        ],
                        relevance_label: (di % 5) as u8,
                    })
                    .collect(),
            })
            .collect();
        let dataset = Dataset::new(Split::Train, queries, 2).unwrap();
        let bias = BiasParams::default_trust();
        let logging = RankingPolicy::new(Scorer::linear(2), 5, 1.0).unwrap();
        let log = simulate_sessions(&logging, &dataset, &bias, 400, false, 5).unwrap();
        for e in &log.entries {
            let q = dataset.query(e.query_id).unwrap();
            assert_eq!(e.displayed.len(), q.n_docs().min(5));
        }
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 4,
            patience: 4,
            mc_samples_per_query: 8,
            objective: ObjectiveKind::SafeDr { delta: 0.5 },
            ..TrainConfig::default()
        };
        let report =
            train_policy(&logging, &log, &log, &dataset, &dataset, &config).unwrap();
        assert!(report.validation_trace.iter().all(|v| v.is_finite()));
        let eval = crate::evaluate::ndcg_at_k(
            &report.final_policy,
            &dataset,
            5,
            crate::evaluate::EvalMode::Expected,
            50,
            1,
        )
        .unwrap();
        assert!(eval.ndcg_at_k > 0.0 && eval.ndcg_at_k <= 1.0);
    }

    #[test]
    fn empty_training_log_is_error() {
        let (train, vali, log, vlog, logging) = setup(50, 14);
        let prepared = PreparedLog { queries: vec![], n_total: 0.0, bias: log.bias.clone() };
        let vprep = prepare_log(&vlog, &vali, false).unwrap();
        let err = train_prepared(
            &logging,
            &train,
            &prepared,
            &vali,
            &vprep,
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(CltrError::EmptyLog(_))));
    }
}
