//! Honeypot placement as contrastive optimization: raw pot parameters
//! are normalized on read, scored by how much of a query's retrieval
//! set they capture, and trained with an InfoNCE objective that pulls
//! pots toward attacker queries and away from benign ones, plus a
//! diversity penalty that spreads pots apart.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{jittered_unit, select_top_k, EmbeddingVector, MIN_NORM};
use crate::error::{MempotError, Result};
use crate::memory::AugmentedMemory;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PotTrainConfig {
    /// Number of trainable pots.
    pub num_pots: usize,
    /// Contrastive group size: one attacker query plus
    /// nce_group_size - 1 benign negatives.
    pub nce_group_size: usize,
    /// Depth of the top-k mask used when scoring queries.
    pub retrieval_k: usize,
    /// Weight on the pairwise pot-similarity penalty.
    pub beta_div: f64,
    pub learning_rate: f64,
    /// Gradient steps; zero means return the initial pots untouched.
    pub steps: usize,
    /// Contrastive groups sampled per step.
    pub batch_groups: usize,
    pub seed: u64,
}

impl Default for PotTrainConfig {
    fn default() -> Self {
        PotTrainConfig {
            num_pots: 4,
            nce_group_size: 8,
            retrieval_k: 4,
            beta_div: 0.1,
            learning_rate: 0.05,
            steps: 500,
            batch_groups: 32,
            seed: 0,
        }
    }
}

impl PotTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pots == 0 {
            return Err(MempotError::invalid_argument("num_pots must be >= 1"));
        }
        if self.nce_group_size < 2 {
            return Err(MempotError::invalid_argument(
                "nce_group_size must be >= 2 (one positive plus at least one negative)",
            ));
        }
        if self.retrieval_k == 0 {
            return Err(MempotError::invalid_argument("retrieval_k must be >= 1"));
        }
        if self.batch_groups == 0 {
            return Err(MempotError::invalid_argument("batch_groups must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(MempotError::invalid_argument(
                "learning_rate must be finite and > 0",
            ));
        }
        if !(self.beta_div >= 0.0) || !self.beta_div.is_finite() {
            return Err(MempotError::invalid_argument(
                "beta_div must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Unconstrained pot parameters. The pot embeddings are the normalized
/// rows; gradients apply to the raw rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PotParams {
    raw: Vec<Vec<f64>>,
    dim: usize,
}

impl PotParams {
    pub fn from_vectors(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(MempotError::invalid_argument("need at least one pot"));
        }
        let dim = vectors[0].dim();
        for v in &vectors {
            if v.dim() != dim {
                return Err(MempotError::Dimension {
                    expected: dim,
                    got: v.dim(),
                });
            }
        }
        Ok(PotParams {
            raw: vectors.into_iter().map(|v| v.components().to_vec()).collect(),
            dim,
        })
    }

    /// Round-robin over cluster centroids with Gaussian jitter so pots
    /// start on the document manifold where queries can select them.
    /// With num_pots a multiple of the centroid count, each cluster
    /// seeds the same number of pots.
    pub fn init_from_centroids(
        centroids: &[EmbeddingVector],
        num_pots: usize,
        jitter: f64,
        seed: u64,
    ) -> Result<Self> {
        if centroids.is_empty() {
            return Err(MempotError::invalid_argument("no centroids to seed pots from"));
        }
        if num_pots == 0 {
            return Err(MempotError::invalid_argument("num_pots must be >= 1"));
        }
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(MempotError::invalid_argument("jitter must be finite and >= 0"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let vectors = (0..num_pots)
            .map(|p| {
                let base = &centroids[p % centroids.len()];
                if jitter == 0.0 {
                    base.clone()
                } else {
                    jittered_unit(base, jitter, &mut rng)
                }
            })
            .collect();
        Self::from_vectors(vectors)
    }

    pub fn num_pots(&self) -> usize {
        self.raw.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self) -> &[Vec<f64>] {
        &self.raw
    }

    pub fn unit_pots(&self) -> Result<Vec<EmbeddingVector>> {
        self.raw
            .iter()
            .map(|r| EmbeddingVector::new(r.clone())?.normalized())
            .collect()
    }

    /// Copy with one raw component shifted; used for finite-difference
    /// gradient checks.
    pub fn with_raw_component(&self, pot: usize, component: usize, delta: f64) -> Result<Self> {
        if pot >= self.raw.len() || component >= self.dim {
            return Err(MempotError::invalid_argument("pot or component out of range"));
        }
        let mut out = self.clone();
        out.raw[pot][component] += delta;
        Ok(out)
    }
}

/// Result of scoring one query against fixed corpus items plus
/// candidate pots.
#[derive(Debug, Clone, PartialEq)]
pub struct GkScore {
    /// Sum of similarities of selected pots divided by the full
    /// retrieval depth k (zero when no pot is selected).
    pub score: f64,
    pub selected_pots: Vec<usize>,
    /// Similarity gap between the last selected item and the best
    /// excluded one; infinite when nothing is excluded.
    pub boundary_gap: f64,
}

/// Scores one query against the union of fixed items and pot
/// embeddings; fixed items rank before pots on exact ties.
pub fn gk_score_detailed(
    query: &EmbeddingVector,
    fixed: &[EmbeddingVector],
    pot_units: &[EmbeddingVector],
    k: usize,
) -> Result<GkScore> {
    if k == 0 {
        return Err(MempotError::invalid_argument("k must be >= 1"));
    }
    let mut sims = Vec::with_capacity(fixed.len() + pot_units.len());
    for d in fixed {
        sims.push(query.dot(d)?);
    }
    for p in pot_units {
        sims.push(query.dot(p)?);
    }
    if sims.is_empty() {
        return Ok(GkScore {
            score: 0.0,
            selected_pots: Vec::new(),
            boundary_gap: f64::INFINITY,
        });
    }
    let ranked = select_top_k(&sims, k + 1);
    let taken = ranked.len().min(k);
    let boundary_gap = if ranked.len() > k {
        ranked[k - 1].1 - ranked[k].1
    } else {
        f64::INFINITY
    };
    let mut score = 0.0;
    let mut selected_pots = Vec::new();
    for &(idx, sim) in &ranked[..taken] {
        if idx >= fixed.len() {
            score += sim;
            selected_pots.push(idx - fixed.len());
        }
    }
    Ok(GkScore {
        score: score / k as f64,
        selected_pots,
        boundary_gap,
    })
}

/// Fraction of a query's top-k retrieval mass captured by the pot
/// records already present in the memory: mean over k (not over hits)
/// of the similarities of pots appearing in the top-k; zero when none
/// does.
pub fn gk_score(
    query: &EmbeddingVector,
    memory: &AugmentedMemory,
    retrieval_k: usize,
) -> Result<f64> {
    let docs: Vec<EmbeddingVector> = memory.docs().iter().map(|e| e.vector.clone()).collect();
    let pots: Vec<EmbeddingVector> = memory.pots().iter().map(|e| e.vector.clone()).collect();
    Ok(gk_score_detailed(query, &docs, &pots, retrieval_k)?.score)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE loss for one contrastive set; `scores[0]` is the positive.
pub fn nce_loss_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(MempotError::invalid_argument(
            "contrastive set needs a positive and at least one negative",
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MempotError::invalid_argument("scores must be finite"));
    }
    Ok(-scores[0] + logsumexp(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Losses {
    pub nce: f64,
    pub diversity: f64,
    pub total: f64,
}

/// Validates group shapes: attacker_queries holds one positive per
/// group, benign_queries holds the groups' negatives concatenated in
/// group order.
fn check_groups(
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    config: &PotTrainConfig,
) -> Result<usize> {
    config.validate()?;
    if attacker_queries.is_empty() {
        return Err(MempotError::invalid_argument(
            "need at least one contrastive group",
        ));
    }
    let negs = config.nce_group_size - 1;
    let expected = attacker_queries.len() * negs;
    if benign_queries.len() != expected {
        return Err(MempotError::invalid_argument(format!(
            "{} benign queries for {} groups of size {}; expected {}",
            benign_queries.len(),
            attacker_queries.len(),
            config.nce_group_size,
            expected
        )));
    }
    Ok(attacker_queries.len())
}

fn diversity_from_units(units: &[EmbeddingVector]) -> Result<f64> {
    let p = units.len();
    if p < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..p {
        for j in i + 1..p {
            total += units[i].dot(&units[j])?;
        }
    }
    Ok(total * 2.0 / (p * (p - 1)) as f64)
}

/// Mean pairwise cosine similarity among the pots; zero for a single
/// pot.
pub fn diversity_loss(pots: &PotParams) -> Result<f64> {
    diversity_from_units(&pots.unit_pots()?)
}

fn fixed_corpus(memory: &AugmentedMemory) -> Vec<EmbeddingVector> {
    memory
        .docs()
        .iter()
        .chain(memory.pots().iter())
        .map(|e| e.vector.clone())
        .collect()
}

fn losses_impl(
    fixed: &[EmbeddingVector],
    params: &PotParams,
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    config: &PotTrainConfig,
) -> Result<Losses> {
    let groups = check_groups(attacker_queries, benign_queries, config)?;
    let negs = config.nce_group_size - 1;
    let units = params.unit_pots()?;
    let mut nce = 0.0;
    for g in 0..groups {
        let mut scores = Vec::with_capacity(config.nce_group_size);
        scores.push(
            gk_score_detailed(&attacker_queries[g], fixed, &units, config.retrieval_k)?.score,
        );
        for n in &benign_queries[g * negs..(g + 1) * negs] {
            scores.push(gk_score_detailed(n, fixed, &units, config.retrieval_k)?.score);
        }
        nce += nce_loss_from_scores(&scores)?;
    }
    let nce = nce / groups as f64;
    let diversity = diversity_from_units(&units)?;
    Ok(Losses {
        nce,
        diversity,
        total: nce + config.beta_div * diversity,
    })
}

/// Mean over groups of -log softmax of the attacker's score among its
/// group. Existing pot records in the memory act as fixed corpus
/// items; the trainable pots come from `pots`.
pub fn nce_loss(
    memory: &AugmentedMemory,
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    pots: &PotParams,
    config: &PotTrainConfig,
) -> Result<f64> {
    Ok(losses_impl(&fixed_corpus(memory), pots, attacker_queries, benign_queries, config)?.nce)
}

/// InfoNCE loss plus beta_div times the diversity penalty.
pub fn total_loss(
    memory: &AugmentedMemory,
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    pots: &PotParams,
    config: &PotTrainConfig,
) -> Result<f64> {
    Ok(losses_impl(&fixed_corpus(memory), pots, attacker_queries, benign_queries, config)?.total)
}

fn gradient_impl(
    fixed: &[EmbeddingVector],
    params: &PotParams,
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    config: &PotTrainConfig,
) -> Result<(Losses, Vec<Vec<f64>>)> {
    let groups = check_groups(attacker_queries, benign_queries, config)?;
    let negs = config.nce_group_size - 1;
    let units = params.unit_pots()?;
    let raw_norms: Vec<f64> = params
        .raw
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let p = params.num_pots();
    let dim = params.dim;
    let mut grad = vec![vec![0.0; dim]; p];

    let mut nce = 0.0;
    for g in 0..groups {
        let mut queries: Vec<&EmbeddingVector> = Vec::with_capacity(config.nce_group_size);
        queries.push(&attacker_queries[g]);
        for n in &benign_queries[g * negs..(g + 1) * negs] {
            queries.push(n);
        }

        let gk: Vec<GkScore> = queries
            .iter()
            .map(|q| gk_score_detailed(q, fixed, &units, config.retrieval_k))
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = gk.iter().map(|s| s.score).collect();
        nce += nce_loss_from_scores(&scores)?;

        // Selection is held fixed; the gradient flows through the
        // similarities of selected pots and the normalization map.
        let lse = logsumexp(&scores);
        for (i, (q, sel)) in queries.iter().zip(&gk).enumerate() {
            let dl_ds = (scores[i] - lse).exp() - if i == 0 { 1.0 } else { 0.0 };
            if dl_ds == 0.0 {
                continue;
            }
            for &j in &sel.selected_pots {
                let s = q.dot(&units[j])?;
                let coeff = dl_ds / (config.retrieval_k as f64 * raw_norms[j]);
                let qc = q.components();
                let uc = units[j].components();
                for c in 0..dim {
                    grad[j][c] += coeff * (qc[c] - s * uc[c]);
                }
            }
        }
    }
    let scale = 1.0 / groups as f64;
    for row in &mut grad {
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    let nce = nce * scale;

    let diversity = diversity_from_units(&units)?;
    if p >= 2 && config.beta_div > 0.0 {
        let pair_scale = config.beta_div * 2.0 / (p * (p - 1)) as f64;
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    continue;
                }
                let s = units[i].dot(&units[j])?;
                let ui = units[i].components();
                let uj = units[j].components();
                for c in 0..dim {
                    grad[i][c] += pair_scale * (uj[c] - s * ui[c]) / raw_norms[i];
                }
            }
        }
    }

    Ok((
        Losses {
            nce,
            diversity,
            total: nce + config.beta_div * diversity,
        },
        grad,
    ))
}

/// Analytic gradient of `total_loss` with respect to the raw pot
/// parameters, holding each query's top-k selection fixed. Returns the
/// losses of the same forward pass so callers get a trace for free.
pub fn loss_gradient(
    memory: &AugmentedMemory,
    attacker_queries: &[EmbeddingVector],
    benign_queries: &[EmbeddingVector],
    pots: &PotParams,
    config: &PotTrainConfig,
) -> Result<(Losses, Vec<Vec<f64>>)> {
    gradient_impl(&fixed_corpus(memory), pots, attacker_queries, benign_queries, config)
}

/// Supplies one query embedding per call during training. Implemented
/// for closures so simple generators need no wrapper type.
pub trait QuerySampler {
    fn sample(&mut self, rng: &mut ChaCha12Rng) -> Result<EmbeddingVector>;
}

impl<F> QuerySampler for F
where
    F: FnMut(&mut ChaCha12Rng) -> Result<EmbeddingVector>,
{
    fn sample(&mut self, rng: &mut ChaCha12Rng) -> Result<EmbeddingVector> {
        self(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub nce_loss: f64,
    pub div_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub params: PotParams,
    pub trace: Vec<TraceRow>,
}

/// Plain gradient descent on raw pot parameters. Each step draws
/// batch_groups fresh contrastive groups (one attacker query, then its
/// nce_group_size - 1 benign negatives, in that order) from the
/// samplers; the RNG they see is seeded from the config so runs are
/// reproducible.
pub fn optimize<A: QuerySampler, B: QuerySampler>(
    memory: &AugmentedMemory,
    init: PotParams,
    attacker_sampler: &mut A,
    benign_sampler: &mut B,
    config: &PotTrainConfig,
) -> Result<OptimizeOutcome> {
    config.validate()?;
    if init.num_pots() != config.num_pots {
        return Err(MempotError::invalid_argument(format!(
            "init has {} pots, config expects {}",
            init.num_pots(),
            config.num_pots
        )));
    }
    if init.dim() != memory.dim() {
        return Err(MempotError::Dimension {
            expected: memory.dim(),
            got: init.dim(),
        });
    }
    let fixed = fixed_corpus(memory);
    let negs = config.nce_group_size - 1;
    let mut params = init;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut attacker_queries = Vec::with_capacity(config.batch_groups);
        let mut benign_queries = Vec::with_capacity(config.batch_groups * negs);
        for _ in 0..config.batch_groups {
            attacker_queries.push(attacker_sampler.sample(&mut rng)?);
            for _ in 0..negs {
                benign_queries.push(benign_sampler.sample(&mut rng)?);
            }
        }
        let (losses, grad) =
            gradient_impl(&fixed, &params, &attacker_queries, &benign_queries, config)?;
        if !losses.total.is_finite() {
            return Err(MempotError::OptimizationDiverged {
                step,
                reason: format!("non-finite loss {}", losses.total),
            });
        }
        trace.push(TraceRow {
            step,
            nce_loss: losses.nce,
            div_loss: losses.diversity,
            total_loss: losses.total,
        });
        for (row, grad_row) in params.raw.iter_mut().zip(&grad) {
            for (x, g) in row.iter_mut().zip(grad_row) {
                *x -= config.learning_rate * g;
            }
        }
        for (j, row) in params.raw.iter().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < MIN_NORM {
                return Err(MempotError::OptimizationDiverged {
                    step,
                    reason: format!("pot {j} raw norm became {norm}"),
                });
            }
        }
    }
    Ok(OptimizeOutcome { params, trace })
}
