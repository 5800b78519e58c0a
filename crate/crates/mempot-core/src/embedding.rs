//! Embedding vectors and exact cosine retrieval.
//!
//! Memories here are small enough for exact scans, so top-k is brute
//! force with deterministic tie handling (lowest index wins).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MempotError, Result};

/// Norm below which a vector has no usable direction.
pub const MIN_NORM: f64 = 1e-12;

/// Dense embedding with finite components. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(MempotError::invalid_argument("embedding must be non-empty"));
        }
        if let Some(bad) = components.iter().find(|c| !c.is_finite()) {
            return Err(MempotError::invalid_argument(format!(
                "embedding contains non-finite component {bad}"
            )));
        }
        Ok(EmbeddingVector(components))
    }

    /// Construct and normalize to unit length in one step.
    pub fn unit(components: Vec<f64>) -> Result<Self> {
        EmbeddingVector::new(components)?.normalized()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<EmbeddingVector> {
        let n = self.norm();
        if n < MIN_NORM {
            return Err(MempotError::DegenerateVector { norm: n });
        }
        // Pass already-unit vectors through unchanged so repeated
        // normalization cannot drift by an ulp per pass.
        if (n - 1.0).abs() <= 1e-12 {
            return Ok(self.clone());
        }
        Ok(EmbeddingVector(self.0.iter().map(|c| c / n).collect()))
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(MempotError::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MempotError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        EmbeddingVector::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Vec<f64> {
        v.0
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < MIN_NORM {
        return Err(MempotError::DegenerateVector { norm: na });
    }
    if nb < MIN_NORM {
        return Err(MempotError::DegenerateVector { norm: nb });
    }
    Ok(dot / (na * nb))
}

/// Indices and scores of the k best matches, scores non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl TopKResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Exact top-k by cosine similarity. Ties broken by lowest index.
pub fn top_k(
    query: &EmbeddingVector,
    collection: &[EmbeddingVector],
    k: usize,
) -> Result<TopKResult> {
    if k == 0 {
        return Err(MempotError::invalid_argument("top_k requires k >= 1"));
    }
    let mut scores = Vec::with_capacity(collection.len());
    for item in collection {
        scores.push(cosine_similarity(query, item)?);
    }
    let selected = select_top_k(&scores, k);
    Ok(TopKResult {
        indices: selected.iter().map(|&(i, _)| i).collect(),
        scores: selected.iter().map(|&(_, s)| s).collect(),
    })
}

/// Core selection shared by every retrieval path: k largest scores,
/// ordered by (score desc, index asc). Assumes finite scores.
pub(crate) fn select_top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    fn better(a: (usize, f64), b: (usize, f64)) -> bool {
        a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
    }
    // Sorted buffer of the k best, best first. k is the retrieval
    // depth (tiny) while collections can be thousands, so a linear
    // insert beats a full sort.
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for cand in scores.iter().copied().enumerate() {
        if best.len() == k && !better(cand, best[k - 1]) {
            continue;
        }
        let pos = best
            .iter()
            .position(|&b| better(cand, b))
            .unwrap_or(best.len());
        best.insert(pos, cand);
        if best.len() > k {
            best.pop();
        }
    }
    best
}

/// Deterministic isotropic unit vector from a seed.
pub fn seeded_unit_vector(seed: u64, dim: usize) -> Result<EmbeddingVector> {
    if dim == 0 {
        return Err(MempotError::invalid_argument(
            "seeded_unit_vector requires dim >= 1",
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let candidate = EmbeddingVector::new(v)?;
        if candidate.norm() >= 1e-9 {
            return candidate.normalized();
        }
        // Astronomically unlikely; redraw rather than fail.
    }
}

/// Gaussian perturbation of a base vector, renormalized to the sphere.
/// Redraws in the degenerate case so the result is always a direction.
pub(crate) fn jittered_unit(
    base: &EmbeddingVector,
    scale: f64,
    rng: &mut ChaCha12Rng,
) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = base
            .components()
            .iter()
            .map(|c| {
                let n: f64 = StandardNormal.sample(rng);
                c + scale * n
            })
            .collect();
        let candidate = EmbeddingVector(v);
        if candidate.norm() >= 1e-9 {
            return candidate
                .normalized()
                .expect("norm checked above");
        }
    }
}
