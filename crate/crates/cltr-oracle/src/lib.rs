//! Brute-force reference computations for test suites.
//!
//! Everything here is written for transparency over speed and kept
//! independent of the production code paths it is used to check: ranking
//! distributions come from the direct product formula over explicitly
//! enumerated prefixes, expectations from full outcome enumeration, and
//! tail probabilities from log-space summation.
//!
//! Intended for fixtures with at most 8 documents.

/// All ordered prefixes of length `min(k, n)` of `0..n` with their
/// Plackett-Luce probabilities under softmax(score / temperature) sampling
/// without replacement.
pub fn pl_prefix_distribution(
    scores: &[f64],
    temperature: f64,
    k: usize,
) -> Vec<(Vec<usize>, f64)> {
    let n = scores.len();
    let len = k.min(n);
    assert!(n <= 8, "oracle enumeration limited to 8 docs");
    let exp_scores: Vec<f64> = scores.iter().map(|s| (s / temperature).exp()).collect();

    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    fn rec(
        exp_scores: &[f64],
        len: usize,
        prefix: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if prefix.len() == len {
            // Probability straight from the product formula.
            let mut remaining: Vec<usize> = (0..exp_scores.len()).collect();
            let mut prob = 1.0;
            for &chosen in prefix.iter() {
                let total: f64 = remaining.iter().map(|&i| exp_scores[i]).sum();
                prob *= exp_scores[chosen] / total;
                remaining.retain(|&i| i != chosen);
            }
            out.push((prefix.clone(), prob));
            return;
        }
        for d in 0..exp_scores.len() {
            if !prefix.contains(&d) {
                prefix.push(d);
                rec(exp_scores, len, prefix, out);
                prefix.pop();
            }
        }
    }
    rec(&exp_scores, len, &mut prefix, &mut out);
    out
}

/// Exact per-document expected `alpha` (rho) and `alpha + beta` (omega)
/// weights over a prefix distribution. Undisplayed documents get zero.
pub fn exact_exposure(
    dist: &[(Vec<usize>, f64)],
    n_docs: usize,
    alpha: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut rho = vec![0.0; n_docs];
    let mut omega = vec![0.0; n_docs];
    for (prefix, prob) in dist {
        for (pos, &d) in prefix.iter().enumerate() {
            rho[d] += prob * alpha[pos];
            omega[d] += prob * (alpha[pos] + beta[pos]);
        }
    }
    (rho, omega)
}

/// True utility of a policy whose exact omega weights are known:
/// `sum_d omega(d) * relevance(d)`.
pub fn exact_utility(omega: &[f64], relevance: &[f64]) -> f64 {
    omega.iter().zip(relevance).map(|(w, r)| w * r).sum()
}

/// Visit every (ranking, click-vector) outcome of a single session with its
/// joint probability. `click_prob(doc, rank)` is the click probability of a
/// displayed document at a 1-based rank.
pub fn for_each_outcome(
    dist: &[(Vec<usize>, f64)],
    mut click_prob: impl FnMut(usize, usize) -> f64,
    mut visit: impl FnMut(&[usize], &[bool], f64),
) {
    for (prefix, rank_prob) in dist {
        let len = prefix.len();
        let n_patterns = 1usize << len;
        for pattern in 0..n_patterns {
            let mut clicks = Vec::with_capacity(len);
            let mut prob = *rank_prob;
            for (pos, &d) in prefix.iter().enumerate() {
                let clicked = pattern >> pos & 1 == 1;
                let p = click_prob(d, pos + 1);
                prob *= if clicked { p } else { 1.0 - p };
                clicks.push(clicked);
            }
            if prob > 0.0 {
                visit(prefix, &clicks, prob);
            }
        }
    }
}

/// Exact mean and variance of a statistic over enumerated outcomes.
pub fn outcome_moments(
    dist: &[(Vec<usize>, f64)],
    mut click_prob: impl FnMut(usize, usize) -> f64,
    mut statistic: impl FnMut(&[usize], &[bool]) -> f64,
) -> (f64, f64) {
    let mut mean = 0.0;
    let mut second = 0.0;
    let mut total = 0.0;
    for_each_outcome(dist, &mut click_prob, |prefix, clicks, prob| {
        let v = statistic(prefix, clicks);
        mean += prob * v;
        second += prob * v * v;
        total += prob;
    });
    assert!((total - 1.0).abs() < 1e-9, "outcome probabilities sum to {total}");
    (mean, second - mean * mean)
}

/// `P(Binomial(n, p) <= k)` computed in log space.
pub fn binomial_cdf(n: u64, p: f64, k: u64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if k >= n { 1.0 } else { 0.0 };
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut total = 0.0f64;
    let mut ln_choose = 0.0f64; // ln C(n, 0)
    for i in 0..=k.min(n) {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        total += (ln_choose + i as f64 * ln_p + (n - i) as f64 * ln_q).exp();
    }
    total.min(1.0)
}
