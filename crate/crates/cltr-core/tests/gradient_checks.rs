//! Finite-difference verification of every analytic policy gradient.
//!
//! The Monte-Carlo sample of rankings is frozen and the objective is
//! re-evaluated under importance re-weighting as the parameters move
//! (common random numbers); central differences of that smooth function
//! must match the score-function gradient the trainer uses.

use cltr_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use cltr_core::policy::{pl, reinforce_gradient, sample_ranking, RankingPolicy, Scorer};
use cltr_core::rng::substream;
use cltr_core::simulate::{simulate_sessions, BiasParams, ClickLog};
use cltr_core::train::{frozen_eval, prepare_log, ObjectiveKind};
use rand::Rng;

fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn make_setup(seed: u64, adversarial: bool) -> (Dataset, ClickLog, RankingPolicy) {
    let synth = generate_synthetic(&SyntheticConfig {
        train_queries: 5,
        validation_queries: 1,
        test_queries: 1,
        docs_per_query: 4,
        feature_dim: 3,
        latent_noise: 0.25,
        seed,
    })
    .unwrap();
    let bias = BiasParams::default_trust();
    let mut rng = substream(seed, 77, 0);
    let mut scorer = Scorer::linear(3);
    for p in scorer.params_mut() {
        *p = rng.random::<f64>() - 0.5;
    }
    let logging = RankingPolicy::new(scorer, 4, 1.0).unwrap();
    let log = simulate_sessions(&logging, &synth.train, &bias, 120, adversarial, seed).unwrap();

    // Evaluate gradients at a policy different from the logging one.
    let mut scorer = Scorer::linear(3);
    for p in scorer.params_mut() {
        *p = 0.8 * (rng.random::<f64>() - 0.5);
    }
    let policy = RankingPolicy::new(scorer, 4, 1.0).unwrap();
    (synth.train, log, policy)
}

fn check_objective(objective: ObjectiveKind, fixtures: u64, tolerance: f64) {
    for seed in 0..fixtures {
        let (dataset, log, policy) = make_setup(300 + seed, seed % 3 == 2);
        let prepared = prepare_log(&log, &dataset, true).unwrap();
        let frozen = frozen_eval(&policy, &dataset, &prepared, objective, 24, seed).unwrap();
        let (_, analytic) = frozen.gradient(&policy).unwrap();

        let h = 1e-5;
        let mut fd = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut plus = policy.clone();
            plus.scorer.params_mut()[i] += h;
            let mut minus = policy.clone();
            minus.scorer.params_mut()[i] -= h;
            fd[i] = (frozen.value_at(&plus).unwrap() - frozen.value_at(&minus).unwrap())
                / (2.0 * h);
        }
        let err = relative_error(&analytic, &fd);
        assert!(
            err < tolerance,
            "{objective:?} fixture {seed}: rel err {err}\nanalytic {analytic:?}\nfd {fd:?}"
        );
    }
}

#[test]
fn ips_gradient_matches_finite_differences() {
    check_objective(ObjectiveKind::Ips, 5, 1e-4);
}

#[test]
fn dr_gradient_matches_finite_differences() {
    check_objective(ObjectiveKind::Dr, 5, 1e-4);
}

#[test]
fn safe_ips_gradient_matches_finite_differences() {
    check_objective(ObjectiveKind::SafeIps { delta: 0.5 }, 5, 1e-4);
}

#[test]
fn safe_dr_gradient_matches_finite_differences() {
    check_objective(ObjectiveKind::SafeDr { delta: 0.95 }, 5, 1e-4);
    check_objective(ObjectiveKind::SafeDr { delta: 0.05 }, 3, 1e-4);
}

#[test]
fn prpo_gradient_matches_finite_differences() {
    check_objective(ObjectiveKind::Prpo { eps_minus: 0.7, eps_plus: 1.4 }, 5, 1e-4);
    check_objective(ObjectiveKind::Prpo { eps_minus: 0.25, eps_plus: 4.0 }, 3, 1e-4);
}

#[test]
fn reinforce_estimate_matches_frozen_objective_differences() {
    // The plain REINFORCE estimator of the policy module, checked against
    // the importance-reweighted frozen sample objective
    // J(theta) = mean_j w_j(theta) (R_j - baseline).
    let synth = generate_synthetic(&SyntheticConfig {
        train_queries: 1,
        validation_queries: 1,
        test_queries: 1,
        docs_per_query: 3,
        feature_dim: 2,
        latent_noise: 0.2,
        seed: 41,
    })
    .unwrap();
    let query = &synth.train.queries[0];
    let mut scorer = Scorer::linear(2);
    scorer.params_mut().copy_from_slice(&[0.4, -0.7]);
    let policy = RankingPolicy::new(scorer, 2, 1.0).unwrap();

    let rewards = [0.9, -0.3, 0.2];
    let baseline = 0.25;
    let mut rng = substream(9, 0, 0);
    let rankings: Vec<_> =
        (0..64).map(|_| sample_ranking(&policy, query, &mut rng).unwrap()).collect();
    let analytic = reinforce_gradient(&policy, query, &rankings, &rewards, baseline).unwrap();

    let base_scaled = policy.scaled_scores(query).unwrap();
    let prefixes: Vec<Vec<u32>> =
        rankings.iter().map(|r| r.docs.iter().map(|d| d.0).collect()).collect();
    let base_lp: Vec<f64> =
        prefixes.iter().map(|p| pl::prefix_log_prob(&base_scaled, p)).collect();
    let frozen_value = |p: &RankingPolicy| -> f64 {
        let scaled = p.scaled_scores(query).unwrap();
        prefixes
            .iter()
            .zip(&base_lp)
            .map(|(prefix, lp0)| {
                let w = (pl::prefix_log_prob(&scaled, prefix) - lp0).exp();
                let r: f64 = prefix.iter().map(|&d| rewards[d as usize]).sum();
                w * (r - baseline)
            })
            .sum::<f64>()
            / prefixes.len() as f64
    };

    let h = 1e-4;
    let mut fd = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let mut plus = policy.clone();
        plus.scorer.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.scorer.params_mut()[i] -= h;
        fd[i] = (frozen_value(&plus) - frozen_value(&minus)) / (2.0 * h);
    }
    let err = relative_error(&analytic, &fd);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn two_layer_scorer_gradient_matches_finite_differences() {
    // Same REINFORCE check through the MLP backward pass.
    let synth = generate_synthetic(&SyntheticConfig {
        train_queries: 1,
        validation_queries: 1,
        test_queries: 1,
        docs_per_query: 4,
        feature_dim: 3,
        latent_noise: 0.2,
        seed: 43,
    })
    .unwrap();
    let query = &synth.train.queries[0];
    let mut scorer = Scorer::two_layer(3, 4);
    let mut rng = substream(11, 0, 0);
    scorer.randomize(1.0, &mut rng);
    let policy = RankingPolicy::new(scorer, 3, 1.0).unwrap();

    let rewards = [0.5, -0.1, 0.8, 0.0];
    let rankings: Vec<_> =
        (0..48).map(|_| sample_ranking(&policy, query, &mut rng).unwrap()).collect();
    let analytic = reinforce_gradient(&policy, query, &rankings, &rewards, 0.1).unwrap();

    let prefixes: Vec<Vec<u32>> =
        rankings.iter().map(|r| r.docs.iter().map(|d| d.0).collect()).collect();
    let base_scaled = policy.scaled_scores(query).unwrap();
    let base_lp: Vec<f64> =
        prefixes.iter().map(|p| pl::prefix_log_prob(&base_scaled, p)).collect();
    let frozen_value = |p: &RankingPolicy| -> f64 {
        let scaled = p.scaled_scores(query).unwrap();
        prefixes
            .iter()
            .zip(&base_lp)
            .map(|(prefix, lp0)| {
                let w = (pl::prefix_log_prob(&scaled, prefix) - lp0).exp();
                let r: f64 = prefix.iter().map(|&d| rewards[d as usize]).sum();
                w * (r - 0.1)
            })
            .sum::<f64>()
            / prefixes.len() as f64
    };

    let h = 1e-5;
    let mut fd = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let mut plus = policy.clone();
        plus.scorer.params_mut()[i] += h;
        let mut minus = policy.clone();
        minus.scorer.params_mut()[i] -= h;
        fd[i] = (frozen_value(&plus) - frozen_value(&minus)) / (2.0 * h);
    }
    let err = relative_error(&analytic, &fd);
    assert!(err < 1e-4, "rel err {err}");
}
