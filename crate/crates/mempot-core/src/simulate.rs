//! Session simulators: attacker random walk over the document graph, a
//! cluster-Gaussian benign sampler, and a ridge-regression attacker
//! proxy with closed-loop rollout.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{jittered_unit, top_k, EmbeddingVector};
use crate::error::{MempotError, Result};
use crate::memory::{AugmentedMemory, ClusterAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryLabel {
    Attacker,
    Benign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectorySource {
    RandomWalk,
    ProxyModel,
    BenignSampler,
    /// Queries supplied directly (loaded from file or constructed).
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: TrajectoryLabel,
    pub seed: u64,
    pub source: TrajectorySource,
    pub queries: Vec<EmbeddingVector>,
}

/// Similarity-topology random walk. The walker sees only documents,
/// never pots: each round it jumps to a uniformly chosen member of the
/// current query's top-`walk_k` docs plus Gaussian jitter.
pub fn random_walk_attacker(
    memory: &AugmentedMemory,
    seed_query: &EmbeddingVector,
    walk_k: usize,
    rounds: usize,
    jitter: f64,
    seed: u64,
) -> Result<Trajectory> {
    if walk_k == 0 {
        return Err(MempotError::invalid_argument("walk_k must be >= 1"));
    }
    if rounds == 0 {
        return Err(MempotError::invalid_argument("rounds must be >= 1"));
    }
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(MempotError::invalid_argument("jitter must be finite and >= 0"));
    }
    if memory.docs().is_empty() {
        return Err(MempotError::invalid_argument(
            "random walk requires at least one document",
        ));
    }
    let docs = memory.doc_vectors();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut q = seed_query.normalized()?;
    if q.dim() != memory.dim() {
        return Err(MempotError::Dimension {
            expected: memory.dim(),
            got: q.dim(),
        });
    }
    let mut queries = Vec::with_capacity(rounds);
    queries.push(q.clone());
    for _ in 1..rounds {
        let near = top_k(&q, &docs, walk_k)?;
        let pick = near.indices[rng.random_range(0..near.len())];
        q = if jitter == 0.0 {
            docs[pick].clone()
        } else {
            jittered_unit(&docs[pick], jitter, &mut rng)
        };
        queries.push(q.clone());
    }
    Ok(Trajectory {
        label: TrajectoryLabel::Attacker,
        seed,
        source: TrajectorySource::RandomWalk,
        queries,
    })
}

/// Benign user with a fixed intent: queries scatter around one cluster
/// centroid with Gaussian spread.
pub fn benign_sampler(
    clusters: &ClusterAssignment,
    intent_cluster: usize,
    rounds: usize,
    spread: f64,
    seed: u64,
) -> Result<Trajectory> {
    if rounds == 0 {
        return Err(MempotError::invalid_argument("rounds must be >= 1"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(MempotError::invalid_argument("spread must be finite and >= 0"));
    }
    let centroid = clusters.centroids.get(intent_cluster).ok_or_else(|| {
        MempotError::invalid_argument(format!(
            "intent_cluster {intent_cluster} out of range (num_clusters {})",
            clusters.num_clusters
        ))
    })?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let queries = (0..rounds)
        .map(|_| {
            if spread == 0.0 {
                centroid.clone()
            } else {
                jittered_unit(centroid, spread, &mut rng)
            }
        })
        .collect();
    Ok(Trajectory {
        label: TrajectoryLabel::Benign,
        seed,
        source: TrajectorySource::BenignSampler,
        queries,
    })
}

/// Linear next-query predictor fit by ridge regression on sliding
/// windows of (query, retrieval similarities) features.
#[derive(Debug, Clone)]
pub struct AttackerProxy {
    /// Row-major (feature_dim x dim) weight matrix.
    weights: Vec<f64>,
    feature_dim: usize,
    dim: usize,
    window: usize,
    retrieval_k: usize,
    /// Mean cosine between fitted predictions and targets.
    pub train_cosine: f64,
}

impl AttackerProxy {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[cfg(test)]
    pub(crate) fn from_weights(
        weights: Vec<f64>,
        feature_dim: usize,
        dim: usize,
        window: usize,
        retrieval_k: usize,
    ) -> Self {
        AttackerProxy {
            weights,
            feature_dim,
            dim,
            window,
            retrieval_k,
            train_cosine: 0.0,
        }
    }

    fn predict_raw(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.feature_dim);
        let mut out = vec![0.0; self.dim];
        for (r, &f) in features.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &self.weights[r * self.dim..(r + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += f * w;
            }
        }
        out
    }
}

/// One round's feature block: query components then similarities
/// zero-padded to `retrieval_k` slots.
fn round_block(query: &EmbeddingVector, sims: &[f64], retrieval_k: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(query.components());
    for i in 0..retrieval_k {
        out.push(sims.get(i).copied().unwrap_or(0.0));
    }
}

/// Window feature for predicting the query after position `t`
/// (0-indexed). Rounds before the trajectory start are zero blocks,
/// oldest first.
fn window_features(
    rounds: &[(EmbeddingVector, Vec<f64>)],
    t: usize,
    window: usize,
    retrieval_k: usize,
    dim: usize,
) -> Vec<f64> {
    let block = dim + retrieval_k;
    let mut out = Vec::with_capacity(window * block);
    for offset in (0..window).rev() {
        match t.checked_sub(offset) {
            Some(idx) => round_block(&rounds[idx].0, &rounds[idx].1, retrieval_k, &mut out),
            None => out.extend(std::iter::repeat(0.0).take(block)),
        }
    }
    out
}

fn observe_rounds(
    memory: &AugmentedMemory,
    queries: &[EmbeddingVector],
) -> Result<Vec<(EmbeddingVector, Vec<f64>)>> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let obs = memory.retrieve(q, i as u32)?;
            let sims = obs.retrieved.iter().map(|r| r.similarity).collect();
            Ok((q.clone(), sims))
        })
        .collect()
}

pub fn fit_attacker_proxy(
    trajectories: &[Trajectory],
    memory: &AugmentedMemory,
    window: usize,
    ridge: f64,
) -> Result<AttackerProxy> {
    if window == 0 {
        return Err(MempotError::invalid_argument("window must be >= 1"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(MempotError::invalid_argument("ridge must be finite and >= 0"));
    }
    if !trajectories.iter().any(|t| t.queries.len() > window) {
        return Err(MempotError::InsufficientData(format!(
            "need at least one trajectory longer than the window ({window})"
        )));
    }
    let dim = memory.dim();
    let retrieval_k = memory.retrieval_k();
    let feature_dim = window * (dim + retrieval_k);

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for traj in trajectories {
        if traj.queries.len() < 2 {
            continue;
        }
        let rounds = observe_rounds(memory, &traj.queries)?;
        for t in 0..rounds.len() - 1 {
            let f = window_features(&rounds, t, window, retrieval_k, dim);
            xs.extend_from_slice(&f);
            ys.extend_from_slice(rounds[t + 1].0.components());
            n_rows += 1;
        }
    }
    if n_rows == 0 {
        return Err(MempotError::InsufficientData(
            "no training transitions available".into(),
        ));
    }

    let x = DMatrix::from_row_slice(n_rows, feature_dim, &xs);
    let y = DMatrix::from_row_slice(n_rows, dim, &ys);
    let xt = x.transpose();
    let gram = &xt * &x + DMatrix::identity(feature_dim, feature_dim) * ridge;
    let rhs = &xt * &y;
    let w = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| gram.lu().solve(&rhs))
        .ok_or_else(|| {
            MempotError::InsufficientData(
                "singular normal equations; increase ridge".into(),
            )
        })?;

    let pred = &x * &w;
    let mut cos_sum = 0.0;
    for r in 0..n_rows {
        let p = pred.row(r);
        let t = y.row(r);
        let (mut dot, mut np, mut nt) = (0.0, 0.0, 0.0);
        for c in 0..dim {
            dot += p[c] * t[c];
            np += p[c] * p[c];
            nt += t[c] * t[c];
        }
        if np > 0.0 && nt > 0.0 {
            cos_sum += dot / (np.sqrt() * nt.sqrt());
        }
    }

    let mut weights = vec![0.0; feature_dim * dim];
    for r in 0..feature_dim {
        for c in 0..dim {
            weights[r * dim + c] = w[(r, c)];
        }
    }
    Ok(AttackerProxy {
        weights,
        feature_dim,
        dim,
        window,
        retrieval_k,
        train_cosine: cos_sum / n_rows as f64,
    })
}

/// Closed-loop rollout: each predicted query is normalized, re-queried
/// against the memory, and fed back into the feature window.
pub fn proxy_rollout(
    proxy: &AttackerProxy,
    memory: &AugmentedMemory,
    seed_query: &EmbeddingVector,
    rounds: usize,
) -> Result<Trajectory> {
    if rounds == 0 {
        return Err(MempotError::invalid_argument("rounds must be >= 1"));
    }
    if proxy.dim != memory.dim() {
        return Err(MempotError::Dimension {
            expected: proxy.dim,
            got: memory.dim(),
        });
    }
    if proxy.retrieval_k != memory.retrieval_k() {
        return Err(MempotError::invalid_argument(format!(
            "proxy fitted at retrieval_k {} but memory retrieves {}",
            proxy.retrieval_k,
            memory.retrieval_k()
        )));
    }
    let q0 = seed_query.normalized()?;
    let mut history = observe_rounds(memory, std::slice::from_ref(&q0))?;
    let mut queries = vec![q0];
    for t in 1..rounds {
        let f = window_features(&history, t - 1, proxy.window, proxy.retrieval_k, proxy.dim);
        let raw = proxy.predict_raw(&f);
        let next = EmbeddingVector::new(raw)?.normalized()?;
        let obs = memory.retrieve(&next, t as u32)?;
        let sims = obs.retrieved.iter().map(|r| r.similarity).collect();
        history.push((next.clone(), sims));
        queries.push(next);
    }
    Ok(Trajectory {
        label: TrajectoryLabel::Attacker,
        seed: 0,
        source: TrajectorySource::ProxyModel,
        queries,
    })
}
