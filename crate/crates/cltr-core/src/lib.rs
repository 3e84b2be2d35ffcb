//! Counterfactual learning to rank with deployment safety.
//!
//! This crate trains stochastic Plackett-Luce ranking policies from biased
//! click logs. It covers the full loop of a semi-synthetic ranking
//! experiment:
//!
//! * [`data`]: SVMLight-with-qid datasets, relevance grades, a seeded
//!   synthetic generator;
//! * [`policy`]: PL policies over linear or two-layer scorers, sampling,
//!   exposure profiles, REINFORCE gradients;
//! * [`simulate`]: trust-bias (and adversarial) click simulation with
//!   Monte-Carlo propensity estimation;
//! * [`estimate`]: policy-aware IPS, direct-method and doubly-robust
//!   utility estimators plus per-document rewards;
//! * [`safety`]: exposure-divergence penalties with a high-confidence
//!   lower bound, and proximal (clipped-ratio) objectives;
//! * [`train`]: policy-gradient training with control variates and early
//!   stopping on validation clicks;
//! * [`evaluate`]: NDCG@K in greedy and expected (sampled) modes.

pub mod data;
pub mod error;
pub mod estimate;
pub mod evaluate;
pub mod policy;
pub mod rng;
pub mod safety;
pub mod simulate;
pub mod train;
pub mod values;

pub use error::{CltrError, Result};
