//! Sequential probability ratio test over retrieval observations.
//!
//! Each round contributes an estimated log-likelihood ratio; the
//! accumulated statistic stops at Wald boundaries
//! log A = log((1-beta)/alpha), log B = log(beta/(1-alpha)).

use serde::{Deserialize, Serialize};

use crate::error::{MempotError, Result};
use crate::memory::RetrievalObservation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlrEstimator {
    /// log((|pots retrieved| + eps_cnt) / (|docs retrieved| + eps_cnt))
    CountRatio,
    /// log of the ratio of summed retrieved similarities, pots vs docs.
    SimilarityRatio,
    /// log of the ratio of mean top-K similarities, pots vs docs.
    GlobalSimilarityRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SprtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub estimator: LlrEstimator,
    pub eps_cnt: f64,
    pub eps_sim: f64,
    /// Pool depth for the global-similarity estimator.
    pub global_k: usize,
    pub max_rounds: u32,
}

impl Default for SprtConfig {
    fn default() -> Self {
        SprtConfig {
            alpha: 0.1,
            beta: 0.1,
            estimator: LlrEstimator::CountRatio,
            eps_cnt: 1.0,
            eps_sim: 1e-6,
            global_k: 4,
            max_rounds: 64,
        }
    }
}

impl SprtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(MempotError::invalid_argument(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if self.alpha + self.beta >= 1.0 {
            return Err(MempotError::invalid_argument(
                "alpha + beta must be < 1 so the boundaries bracket zero",
            ));
        }
        if self.eps_cnt <= 0.0 {
            return Err(MempotError::invalid_argument("eps_cnt must be > 0"));
        }
        if self.eps_sim <= 0.0 {
            return Err(MempotError::invalid_argument("eps_sim must be > 0"));
        }
        if self.global_k == 0 {
            return Err(MempotError::invalid_argument("global_k must be >= 1"));
        }
        if self.max_rounds == 0 {
            return Err(MempotError::invalid_argument("max_rounds must be >= 1"));
        }
        Ok(())
    }

    /// Upper stop boundary, log((1-beta)/alpha); positive when valid.
    pub fn log_a(&self) -> f64 {
        ((1.0 - self.beta) / self.alpha).ln()
    }

    /// Lower stop boundary, log(beta/(1-alpha)); negative when valid.
    pub fn log_b(&self) -> f64 {
        (self.beta / (1.0 - self.alpha)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Undecided,
    Attacker,
    Benign,
}

/// One streaming detector session. Step it with per-round LLR values
/// until it crosses a boundary or truncates at max_rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtSession {
    lambda: f64,
    rounds_observed: u32,
    decision: Decision,
    decision_round: Option<u32>,
    truncated: bool,
}

impl Default for SprtSession {
    fn default() -> Self {
        SprtSession::new()
    }
}

impl SprtSession {
    pub fn new() -> Self {
        SprtSession {
            lambda: 0.0,
            rounds_observed: 0,
            decision: Decision::Undecided,
            decision_round: None,
            truncated: false,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rounds_observed(&self) -> u32 {
        self.rounds_observed
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn decision_round(&self) -> Option<u32> {
        self.decision_round
    }

    /// Reached max_rounds with no boundary crossing. Treated as benign
    /// downstream but reported separately.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn is_open(&self) -> bool {
        self.decision == Decision::Undecided && !self.truncated
    }

    /// Accumulate one round. Errors once the session is closed.
    pub fn step(&mut self, llr: f64, config: &SprtConfig) -> Result<Decision> {
        config.validate()?;
        if !llr.is_finite() {
            return Err(MempotError::InvalidObservation(format!(
                "non-finite llr {llr}"
            )));
        }
        if !self.is_open() {
            let state = if self.truncated {
                "truncated".to_string()
            } else {
                format!("{:?}", self.decision).to_lowercase()
            };
            return Err(MempotError::SessionClosed {
                round: self.rounds_observed,
                state,
            });
        }
        self.lambda += llr;
        self.rounds_observed += 1;
        if self.lambda >= config.log_a() {
            self.decision = Decision::Attacker;
            self.decision_round = Some(self.rounds_observed);
        } else if self.lambda <= config.log_b() {
            self.decision = Decision::Benign;
            self.decision_round = Some(self.rounds_observed);
        } else if self.rounds_observed >= config.max_rounds {
            self.truncated = true;
        }
        Ok(self.decision)
    }
}

/// Per-round LLR estimate from one retrieval observation.
pub fn estimate_llr(obs: &RetrievalObservation, config: &SprtConfig) -> Result<f64> {
    config.validate()?;
    if obs.retrieved.is_empty() {
        return Err(MempotError::InvalidObservation(
            "empty retrieval observation".into(),
        ));
    }
    // Similarities are clamped to [0, 1] for the similarity-based
    // estimators so anti-correlated matches cannot flip ratio signs.
    let clamp = |s: f64| s.clamp(0.0, 1.0);
    match config.estimator {
        LlrEstimator::CountRatio => {
            let pots = obs.retrieved.iter().filter(|r| r.is_pot).count() as f64;
            let docs = obs.retrieved.len() as f64 - pots;
            Ok(((pots + config.eps_cnt) / (docs + config.eps_cnt)).ln())
        }
        LlrEstimator::SimilarityRatio => {
            let (mut pot_sum, mut doc_sum) = (0.0, 0.0);
            for r in &obs.retrieved {
                if r.is_pot {
                    pot_sum += clamp(r.similarity);
                } else {
                    doc_sum += clamp(r.similarity);
                }
            }
            Ok(((pot_sum + config.eps_sim) / (doc_sum + config.eps_sim)).ln())
        }
        LlrEstimator::GlobalSimilarityRatio => {
            // Retrieved items arrive sorted by similarity, so the first
            // K of each kind are the top-K. Means run over
            // min(global_k, available); an empty side contributes 0.
            let mean_top = |want_pot: bool| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for r in obs.retrieved.iter().filter(|r| r.is_pot == want_pot) {
                    if count == config.global_k {
                        break;
                    }
                    sum += clamp(r.similarity);
                    count += 1;
                }
                if count == 0 {
                    0.0
                } else {
                    sum / count as f64
                }
            };
            let pot_mean = mean_top(true);
            let doc_mean = mean_top(false);
            Ok(((pot_mean + config.eps_sim) / (doc_mean + config.eps_sim)).ln())
        }
    }
}

/// Wald's expected-stopping-round approximations: under the attacker
/// hypothesis |log B|/mu1, under benign |log A|/|mu0|. Valid when
/// per-round drift overshoot is small relative to the boundaries.
pub fn wald_asn_estimate(mu1: f64, mu0: f64, config: &SprtConfig) -> Result<(f64, f64)> {
    config.validate()?;
    if !(mu1 > 0.0) || !mu1.is_finite() {
        return Err(MempotError::invalid_argument(format!(
            "mu1 must be finite and > 0, got {mu1}"
        )));
    }
    if !(mu0 < 0.0) || !mu0.is_finite() {
        return Err(MempotError::invalid_argument(format!(
            "mu0 must be finite and < 0, got {mu0}"
        )));
    }
    Ok((config.log_b().abs() / mu1, config.log_a().abs() / mu0.abs()))
}
