//! Session runner and metrics: stream trajectories through retrieval
//! and the sequential test, then score detection quality (AUROC,
//! TPR at fixed FPR, first detection time, drift estimates) and
//! compare against a fixed-length static baseline.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::EmbeddingVector;
use crate::error::{MempotError, Result};
use crate::memory::AugmentedMemory;
use crate::simulate::{Trajectory, TrajectoryLabel};
use crate::sprt::{estimate_llr, Decision, SprtConfig, SprtSession};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub label: TrajectoryLabel,
    /// Session detection score: max accumulated LLR over rounds.
    pub score: f64,
    pub decision: Decision,
    pub decision_round: Option<u32>,
    /// Mean detector (estimate + step) wall time per round, seconds.
    pub per_round_wall_time: f64,
    /// Sum of per-round estimated LLRs over the observed rounds.
    pub llr_sum: f64,
    pub rounds_observed: u32,
}

/// Streams each trajectory through retrieve -> estimate -> step until
/// a decision, truncation, or the trajectory ends. Sessions run in
/// parallel; output order matches input order.
pub fn run_sessions(
    memory: &AugmentedMemory,
    trajectories: &[Trajectory],
    config: &SprtConfig,
) -> Result<Vec<SessionOutcome>> {
    config.validate()?;
    if trajectories.is_empty() {
        return Err(MempotError::invalid_argument("no trajectories to run"));
    }
    trajectories
        .par_iter()
        .map(|traj| run_one(memory, traj, config))
        .collect()
}

fn run_one(
    memory: &AugmentedMemory,
    traj: &Trajectory,
    config: &SprtConfig,
) -> Result<SessionOutcome> {
    if traj.queries.is_empty() {
        return Err(MempotError::invalid_argument("trajectory has no queries"));
    }
    let mut session = SprtSession::new();
    let mut max_lambda = f64::NEG_INFINITY;
    let mut llr_sum = 0.0;
    let mut detector_time = 0.0;
    for (i, q) in traj.queries.iter().enumerate() {
        let obs = memory.retrieve(q, i as u32)?;
        let start = Instant::now();
        let llr = estimate_llr(&obs, config)?;
        session.step(llr, config)?;
        detector_time += start.elapsed().as_secs_f64();
        llr_sum += llr;
        max_lambda = max_lambda.max(session.lambda());
        if !session.is_open() {
            break;
        }
    }
    let rounds = session.rounds_observed();
    Ok(SessionOutcome {
        label: traj.label,
        score: max_lambda,
        decision: session.decision(),
        decision_round: session.decision_round(),
        per_round_wall_time: detector_time / rounds as f64,
        llr_sum,
        rounds_observed: rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub tpr_at_10pct_fpr: f64,
    /// Mean decision round over attackers decided Attacker; absent
    /// when none were detected.
    pub fdt: Option<f64>,
    pub attacker_detection_rate: f64,
    /// Mean per-round detector wall time, seconds.
    pub mean_delay_s: f64,
    /// Empirical per-round LLR means over the observed (stopped)
    /// attacker and benign rounds.
    pub mu1_hat: f64,
    pub mu0_hat: f64,
}

fn split_scores(outcomes: &[SessionOutcome]) -> (Vec<f64>, Vec<f64>) {
    let mut attackers = Vec::new();
    let mut benign = Vec::new();
    for o in outcomes {
        match o.label {
            TrajectoryLabel::Attacker => attackers.push(o.score),
            TrajectoryLabel::Benign => benign.push(o.score),
        }
    }
    (attackers, benign)
}

/// Rank-statistic AUROC with midranks for ties.
pub fn auroc(attacker_scores: &[f64], benign_scores: &[f64]) -> Result<f64> {
    if attacker_scores.is_empty() || benign_scores.is_empty() {
        return Err(MempotError::MetricUndefined(
            "auroc needs sessions of both labels".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = attacker_scores
        .iter()
        .map(|&s| (s, true))
        .chain(benign_scores.iter().map(|&s| (s, false)))
        .collect();
    if all.iter().any(|(s, _)| !s.is_finite()) {
        return Err(MempotError::invalid_argument("scores must be finite"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_sum_attacker = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // Midrank of the tie group [i, j), 1-based ranks.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_attacker += midrank;
            }
        }
        i = j;
    }
    let na = attacker_scores.len() as f64;
    let nb = benign_scores.len() as f64;
    Ok((rank_sum_attacker - na * (na + 1.0) / 2.0) / (na * nb))
}

/// TPR at the smallest threshold whose FPR does not exceed the budget.
/// Prediction is strict: a session is flagged when score > threshold.
pub fn tpr_at_fpr(attacker_scores: &[f64], benign_scores: &[f64], fpr_budget: f64) -> Result<f64> {
    if attacker_scores.is_empty() || benign_scores.is_empty() {
        return Err(MempotError::MetricUndefined(
            "tpr@fpr needs sessions of both labels".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fpr_budget) {
        return Err(MempotError::invalid_argument("fpr budget must be in [0, 1]"));
    }
    let allowed = (fpr_budget * benign_scores.len() as f64).floor() as usize;
    if allowed >= benign_scores.len() {
        return Ok(1.0);
    }
    let mut benign = benign_scores.to_vec();
    benign.sort_by(|a, b| b.total_cmp(a));
    // Threshold sits at the (allowed+1)-th largest benign score; the
    // strict comparison keeps every tie on the negative side.
    let threshold = benign[allowed];
    let hits = attacker_scores.iter().filter(|&&s| s > threshold).count();
    Ok(hits as f64 / attacker_scores.len() as f64)
}

/// ROC as (threshold, fpr, tpr) rows, thresholds descending from the
/// top score; prediction is score >= threshold.
pub fn roc_points(attacker_scores: &[f64], benign_scores: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if attacker_scores.is_empty() || benign_scores.is_empty() {
        return Err(MempotError::MetricUndefined(
            "roc needs sessions of both labels".into(),
        ));
    }
    let mut thresholds: Vec<f64> = attacker_scores
        .iter()
        .chain(benign_scores.iter())
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let na = attacker_scores.len() as f64;
    let nb = benign_scores.len() as f64;
    let mut rows = Vec::with_capacity(thresholds.len() + 1);
    rows.push((f64::INFINITY, 0.0, 0.0));
    for t in thresholds {
        let tpr = attacker_scores.iter().filter(|&&s| s >= t).count() as f64 / na;
        let fpr = benign_scores.iter().filter(|&&s| s >= t).count() as f64 / nb;
        rows.push((t, fpr, tpr));
    }
    Ok(rows)
}

pub fn compute_metrics(outcomes: &[SessionOutcome], max_rounds: u32) -> Result<MetricsReport> {
    let (attackers, benign) = split_scores(outcomes);
    let auroc = auroc(&attackers, &benign)?;

    let mut detected_rounds = Vec::new();
    let mut n_attackers = 0usize;
    let (mut llr1, mut rounds1, mut llr0, mut rounds0) = (0.0, 0u64, 0.0, 0u64);
    let mut delay_sum = 0.0;
    for o in outcomes {
        if let Some(r) = o.decision_round {
            if r > max_rounds {
                return Err(MempotError::invalid_argument(format!(
                    "decision round {r} exceeds max_rounds {max_rounds}"
                )));
            }
        }
        delay_sum += o.per_round_wall_time;
        match o.label {
            TrajectoryLabel::Attacker => {
                n_attackers += 1;
                llr1 += o.llr_sum;
                rounds1 += o.rounds_observed as u64;
                if o.decision == Decision::Attacker {
                    detected_rounds
                        .push(o.decision_round.expect("decided sessions have a round") as f64);
                }
            }
            TrajectoryLabel::Benign => {
                llr0 += o.llr_sum;
                rounds0 += o.rounds_observed as u64;
            }
        }
    }
    let fdt = if detected_rounds.is_empty() {
        None
    } else {
        Some(detected_rounds.iter().sum::<f64>() / detected_rounds.len() as f64)
    };
    Ok(MetricsReport {
        auroc,
        tpr_at_1pct_fpr: tpr_at_fpr(&attackers, &benign, 0.01)?,
        tpr_at_10pct_fpr: tpr_at_fpr(&attackers, &benign, 0.10)?,
        fdt,
        attacker_detection_rate: detected_rounds.len() as f64 / n_attackers as f64,
        mean_delay_s: delay_sum / outcomes.len() as f64,
        mu1_hat: llr1 / rounds1 as f64,
        mu0_hat: llr0 / rounds0 as f64,
    })
}

/// Mean per-round estimated LLR under each label, over the full
/// trajectories with no stopping (unbiased by the boundaries).
pub fn estimate_drifts(
    memory: &AugmentedMemory,
    attacker_trajs: &[Trajectory],
    benign_trajs: &[Trajectory],
    config: &SprtConfig,
) -> Result<(f64, f64)> {
    config.validate()?;
    if attacker_trajs.is_empty() || benign_trajs.is_empty() {
        return Err(MempotError::invalid_argument(
            "drift estimation needs trajectories on both sides",
        ));
    }
    let mean_llr = |trajs: &[Trajectory]| -> Result<f64> {
        let sums: Vec<(f64, usize)> = trajs
            .par_iter()
            .map(|t| {
                let mut s = 0.0;
                for (i, q) in t.queries.iter().enumerate() {
                    let obs = memory.retrieve(q, i as u32)?;
                    s += estimate_llr(&obs, config)?;
                }
                Ok((s, t.queries.len()))
            })
            .collect::<Result<_>>()?;
        let total: f64 = sums.iter().map(|(s, _)| s).sum();
        let rounds: usize = sums.iter().map(|(_, n)| n).sum();
        if rounds == 0 {
            return Err(MempotError::invalid_argument("trajectories have no queries"));
        }
        Ok(total / rounds as f64)
    };
    Ok((mean_llr(attacker_trajs)?, mean_llr(benign_trajs)?))
}

/// Per-query scorer for the static baseline: similarity to the mean
/// direction of labeled attacker queries.
pub fn attacker_centroid_detector(
    labeled: &[Trajectory],
) -> Result<impl Fn(&EmbeddingVector) -> Result<f64> + Sync> {
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for t in labeled.iter().filter(|t| t.label == TrajectoryLabel::Attacker) {
        for q in &t.queries {
            let acc = acc.get_or_insert_with(|| vec![0.0; q.dim()]);
            if acc.len() != q.dim() {
                return Err(MempotError::Dimension {
                    expected: acc.len(),
                    got: q.dim(),
                });
            }
            for (a, c) in acc.iter_mut().zip(q.components()) {
                *a += c;
            }
            count += 1;
        }
    }
    let acc = acc.ok_or_else(|| {
        MempotError::invalid_argument("no labeled attacker queries for the centroid")
    })?;
    let _ = count;
    let centroid = EmbeddingVector::new(acc)?.normalized()?;
    Ok(move |q: &EmbeddingVector| q.normalized()?.dot(&centroid))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SprtArmReport {
    pub auroc: f64,
    pub tpr_at_10pct_fpr: f64,
    /// Rounds to an Attacker decision over attacker sessions, with
    /// undetected attackers censored at max_rounds.
    pub mean_attacker_decision_rounds: f64,
    pub attacker_detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticArmReport {
    /// Smallest test length achieving both error budgets empirically;
    /// max_rounds with matched=false when no length does.
    pub test_length: u32,
    pub matched: bool,
    pub fpr: f64,
    pub fnr: f64,
    pub auroc: f64,
    pub mean_attacker_decision_rounds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub with_pots: SprtArmReport,
    pub without_pots: SprtArmReport,
    pub static_fixed: StaticArmReport,
}

fn sprt_arm(
    memory: &AugmentedMemory,
    trajectories: &[Trajectory],
    config: &SprtConfig,
) -> Result<SprtArmReport> {
    let outcomes = run_sessions(memory, trajectories, config)?;
    let (attackers, benign) = split_scores(&outcomes);
    let mut rounds_sum = 0.0;
    let mut n_attackers = 0usize;
    let mut detected = 0usize;
    for o in &outcomes {
        if o.label != TrajectoryLabel::Attacker {
            continue;
        }
        n_attackers += 1;
        if o.decision == Decision::Attacker {
            detected += 1;
            rounds_sum += o.decision_round.expect("decided sessions have a round") as f64;
        } else {
            rounds_sum += config.max_rounds as f64;
        }
    }
    if n_attackers == 0 {
        return Err(MempotError::invalid_argument("no attacker sessions in comparison"));
    }
    Ok(SprtArmReport {
        auroc: auroc(&attackers, &benign)?,
        tpr_at_10pct_fpr: tpr_at_fpr(&attackers, &benign, 0.10)?,
        mean_attacker_decision_rounds: rounds_sum / n_attackers as f64,
        attacker_detection_rate: detected as f64 / n_attackers as f64,
    })
}

/// Honeypot-augmented SPRT vs the same SPRT on the unaugmented store
/// vs a fixed-length threshold test on summed per-query static scores,
/// the latter sized to the smallest length meeting the SPRT's error
/// budgets empirically.
pub fn static_comparison<F>(
    memory_without_pots: &AugmentedMemory,
    memory_with_pots: &AugmentedMemory,
    trajectories: &[Trajectory],
    config: &SprtConfig,
    static_detector: F,
) -> Result<ComparisonReport>
where
    F: Fn(&EmbeddingVector) -> Result<f64> + Sync,
{
    config.validate()?;
    let with_pots = sprt_arm(memory_with_pots, trajectories, config)?;
    let without_pots = sprt_arm(memory_without_pots, trajectories, config)?;

    // Per-session cumulative static scores by round.
    let cumulative: Vec<(TrajectoryLabel, Vec<f64>)> = trajectories
        .par_iter()
        .map(|t| {
            let mut acc = 0.0;
            let mut sums = Vec::with_capacity(t.queries.len());
            for q in &t.queries {
                acc += static_detector(q)?;
                sums.push(acc);
            }
            Ok((t.label, sums))
        })
        .collect::<Result<_>>()?;

    let horizon = cumulative
        .iter()
        .map(|(_, s)| s.len() as u32)
        .min()
        .unwrap_or(0)
        .min(config.max_rounds);
    if horizon == 0 {
        return Err(MempotError::invalid_argument("empty trajectories in comparison"));
    }

    let at_length = |n: u32| -> (Vec<f64>, Vec<f64>) {
        let idx = (n - 1) as usize;
        let mut attackers = Vec::new();
        let mut benign = Vec::new();
        for (label, sums) in &cumulative {
            match label {
                TrajectoryLabel::Attacker => attackers.push(sums[idx]),
                TrajectoryLabel::Benign => benign.push(sums[idx]),
            }
        }
        (attackers, benign)
    };

    let mut chosen: Option<(u32, bool, f64, f64)> = None;
    for n in 1..=horizon {
        let (attackers, benign) = at_length(n);
        if attackers.is_empty() || benign.is_empty() {
            return Err(MempotError::invalid_argument(
                "static comparison needs sessions of both labels",
            ));
        }
        let allowed = (config.alpha * benign.len() as f64).floor() as usize;
        let (fpr, fnr) = if allowed >= benign.len() {
            // Every benign session may be flagged: flag everyone.
            (1.0, 0.0)
        } else {
            let mut sorted = benign.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let threshold = sorted[allowed];
            let fp = benign.iter().filter(|&&s| s > threshold).count();
            let fnr = attackers.iter().filter(|&&s| s <= threshold).count();
            (
                fp as f64 / benign.len() as f64,
                fnr as f64 / attackers.len() as f64,
            )
        };
        if fnr <= config.beta {
            chosen = Some((n, true, fpr, fnr));
            break;
        }
        if n == horizon {
            chosen = Some((n, false, fpr, fnr));
        }
    }
    let (n, matched, fpr, fnr) = chosen.expect("horizon >= 1");
    let (attackers, benign) = at_length(n);
    // Flagged attackers pay the fixed test length; missed ones are
    // censored at max_rounds like the SPRT arms.
    let mean_rounds = n as f64 + fnr * (config.max_rounds as f64 - n as f64);
    Ok(ComparisonReport {
        with_pots,
        without_pots,
        static_fixed: StaticArmReport {
            test_length: n,
            matched,
            fpr,
            fnr,
            auroc: auroc(&attackers, &benign)?,
            mean_attacker_decision_rounds: mean_rounds,
        },
    })
}
