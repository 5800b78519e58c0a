//! Augmented memory store: documents plus injected pot entries, exact
//! cosine retrieval over the union, and balanced spherical k-means for
//! intent clustering and pot placement.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::embedding::{select_top_k, EmbeddingVector};
use crate::error::{MempotError, Result};
use crate::io::EmbeddingRecord;

/// One stored entry; vector is unit-norm (normalized at ingestion).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub is_pot: bool,
}

/// Immutable memory snapshot. Retrieval order is docs first, then
/// pots, so similarity ties resolve toward the earliest-ingested doc.
#[derive(Debug, Clone)]
pub struct AugmentedMemory {
    docs: Vec<MemoryEntry>,
    pots: Vec<MemoryEntry>,
    dim: usize,
    retrieval_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedItem {
    pub id: String,
    pub similarity: f64,
    pub is_pot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalObservation {
    pub round_index: u32,
    pub query: EmbeddingVector,
    pub retrieved: Vec<RetrievedItem>,
}

impl AugmentedMemory {
    /// Build from records, normalizing every vector. Ids must be unique
    /// across docs and pots; dimensions must agree.
    pub fn new(records: Vec<EmbeddingRecord>, retrieval_k: usize) -> Result<Self> {
        if retrieval_k == 0 {
            return Err(MempotError::invalid_argument("retrieval_k must be >= 1"));
        }
        if records.is_empty() {
            return Err(MempotError::invalid_argument("memory requires at least one record"));
        }
        let dim = records[0].vector.dim();
        let mut seen = HashSet::new();
        let mut docs = Vec::new();
        let mut pots = Vec::new();
        for rec in records {
            if rec.vector.dim() != dim {
                return Err(MempotError::Dimension {
                    expected: dim,
                    got: rec.vector.dim(),
                });
            }
            if !seen.insert(rec.id.clone()) {
                return Err(MempotError::invalid_argument(format!(
                    "duplicate memory id {:?}",
                    rec.id
                )));
            }
            let entry = MemoryEntry {
                id: rec.id,
                vector: rec.vector.normalized()?,
                is_pot: rec.is_pot,
            };
            if entry.is_pot {
                pots.push(entry);
            } else {
                docs.push(entry);
            }
        }
        Ok(AugmentedMemory {
            docs,
            pots,
            dim,
            retrieval_k,
        })
    }

    pub fn docs(&self) -> &[MemoryEntry] {
        &self.docs
    }

    pub fn pots(&self) -> &[MemoryEntry] {
        &self.pots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn retrieval_k(&self) -> usize {
        self.retrieval_k
    }

    pub fn len(&self) -> usize {
        self.docs.len() + self.pots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pot_ratio(&self) -> f64 {
        self.pots.len() as f64 / self.len() as f64
    }

    pub fn doc_vectors(&self) -> Vec<EmbeddingVector> {
        self.docs.iter().map(|e| e.vector.clone()).collect()
    }

    fn entry(&self, idx: usize) -> &MemoryEntry {
        if idx < self.docs.len() {
            &self.docs[idx]
        } else {
            &self.pots[idx - self.docs.len()]
        }
    }

    /// Top-`retrieval_k` entries over docs and pots by cosine.
    pub fn retrieve(&self, query: &EmbeddingVector, round_index: u32) -> Result<RetrievalObservation> {
        if query.dim() != self.dim {
            return Err(MempotError::Dimension {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let q = query.normalized()?;
        let scores: Vec<f64> = self
            .docs
            .iter()
            .chain(self.pots.iter())
            .map(|e| q.dot(&e.vector).expect("dims checked"))
            .collect();
        let retrieved = select_top_k(&scores, self.retrieval_k)
            .into_iter()
            .map(|(idx, similarity)| {
                let e = self.entry(idx);
                RetrievedItem {
                    id: e.id.clone(),
                    similarity,
                    is_pot: e.is_pot,
                }
            })
            .collect();
        Ok(RetrievalObservation {
            round_index,
            query: q,
            retrieved,
        })
    }

    /// New memory with `pot_vectors` appended under fresh `pot:` ids.
    /// Existing entries are untouched.
    pub fn inject_pots(&self, pot_vectors: &[EmbeddingVector]) -> Result<AugmentedMemory> {
        let mut next = self.clone();
        let existing: HashSet<&str> = self
            .docs
            .iter()
            .chain(self.pots.iter())
            .map(|e| e.id.as_str())
            .collect();
        let mut counter = 0usize;
        for v in pot_vectors {
            if v.dim() != self.dim {
                return Err(MempotError::Dimension {
                    expected: self.dim,
                    got: v.dim(),
                });
            }
            let id = loop {
                let id = format!("pot:{counter}");
                counter += 1;
                if !existing.contains(id.as_str()) && !next.pots.iter().any(|p| p.id == id) {
                    break id;
                }
            };
            next.pots.push(MemoryEntry {
                id,
                vector: v.normalized()?,
                is_pot: true,
            });
        }
        Ok(next)
    }

    pub fn records(&self) -> Vec<EmbeddingRecord> {
        self.docs
            .iter()
            .chain(self.pots.iter())
            .map(|e| EmbeddingRecord {
                id: e.id.clone(),
                vector: e.vector.clone(),
                is_pot: e.is_pot,
            })
            .collect()
    }
}

/// Pot count that brings a store of `doc_count` records to roughly the
/// target pot fraction: floor(r*N / (1-r)), at least 1.
pub fn pot_count_for_ratio(ratio: f64, doc_count: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 0.5) {
        return Err(MempotError::invalid_argument(
            "pot ratio must lie in (0, 0.5)",
        ));
    }
    if doc_count == 0 {
        return Err(MempotError::invalid_argument("doc_count must be >= 1"));
    }
    let raw = ratio * doc_count as f64 / (1.0 - ratio);
    Ok((raw.floor() as usize).max(1))
}

/// Balanced clustering result. `objective_trace` records the clustering
/// objective (sum of 1 - cosine to the assigned centroid) once per
/// iteration and is non-increasing by construction.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub centroids: Vec<EmbeddingVector>,
    pub num_clusters: usize,
    pub objective_trace: Vec<f64>,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_clusters];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Spherical k-means with balanced greedy assignment: cluster sizes
/// never differ by more than one.
pub fn balanced_kmeans(
    docs: &[EmbeddingVector],
    num_clusters: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment> {
    let n = docs.len();
    if num_clusters == 0 || num_clusters > n {
        return Err(MempotError::invalid_argument(format!(
            "num_clusters must lie in 1..={n}, got {num_clusters}"
        )));
    }
    let unit: Vec<EmbeddingVector> = docs
        .iter()
        .map(|d| d.normalized())
        .collect::<Result<_>>()?;
    let dim = unit[0].dim();
    if unit.iter().any(|d| d.dim() != dim) {
        return Err(MempotError::invalid_argument(
            "clustering requires a single dimension",
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, num_clusters);
    let mut centroids: Vec<EmbeddingVector> = picks.iter().map(|i| unit[i].clone()).collect();

    let mut assignments = balanced_assign(&unit, &centroids);
    let mut objective = clustering_objective(&unit, &assignments, &centroids);
    let mut trace = vec![objective];

    for _ in 0..max_iters {
        let new_centroids = updated_centroids(&unit, &assignments, &centroids, num_clusters);
        let obj_centroids = clustering_objective(&unit, &assignments, &new_centroids);
        let new_assignments = balanced_assign(&unit, &new_centroids);
        let obj_assign = clustering_objective(&unit, &new_assignments, &new_centroids);

        let (cand_assign, cand_obj) = if obj_assign <= obj_centroids {
            (new_assignments, obj_assign)
        } else {
            (assignments.clone(), obj_centroids)
        };
        // Accept only non-increasing states; rejects only arise from
        // float dust at convergence.
        if cand_obj > objective {
            trace.push(objective);
            break;
        }
        let converged = cand_assign == assignments && (objective - cand_obj) < 1e-12;
        centroids = new_centroids;
        assignments = cand_assign;
        objective = cand_obj;
        trace.push(objective);
        if converged {
            break;
        }
    }

    Ok(ClusterAssignment {
        assignments,
        centroids,
        num_clusters,
        objective_trace: trace,
    })
}

/// Greedy balanced assignment: sweep (doc, cluster) pairs by descending
/// similarity; a cluster may exceed the base size only while extra
/// slots remain, which forces sizes to differ by at most one.
fn balanced_assign(docs: &[EmbeddingVector], centroids: &[EmbeddingVector]) -> Vec<usize> {
    let n = docs.len();
    let k = centroids.len();
    let base = n / k;
    let rem = n % k;

    let mut triples: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for (i, d) in docs.iter().enumerate() {
        for (j, c) in centroids.iter().enumerate() {
            triples.push((d.dot(c).expect("dims checked"), i, j));
        }
    }
    triples.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut assignment = vec![usize::MAX; n];
    let mut size = vec![0usize; k];
    let mut extras_used = 0usize;
    let mut assigned = 0usize;
    for &(_, i, j) in &triples {
        if assigned == n {
            break;
        }
        if assignment[i] != usize::MAX {
            continue;
        }
        if size[j] < base {
            assignment[i] = j;
            size[j] += 1;
            assigned += 1;
        } else if size[j] == base && extras_used < rem {
            assignment[i] = j;
            size[j] += 1;
            extras_used += 1;
            assigned += 1;
        }
    }
    debug_assert_eq!(assigned, n, "total capacity equals n, sweep must assign all");
    assignment
}

fn updated_centroids(
    docs: &[EmbeddingVector],
    assignments: &[usize],
    previous: &[EmbeddingVector],
    k: usize,
) -> Vec<EmbeddingVector> {
    let dim = docs[0].dim();
    let mut sums = vec![vec![0.0; dim]; k];
    for (d, &a) in docs.iter().zip(assignments) {
        for (s, c) in sums[a].iter_mut().zip(d.components()) {
            *s += c;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(j, s)| {
            EmbeddingVector::new(s)
                .ok()
                .and_then(|v| v.normalized().ok())
                // Degenerate mean: keep the previous centroid.
                .unwrap_or_else(|| previous[j].clone())
        })
        .collect()
}

fn clustering_objective(
    docs: &[EmbeddingVector],
    assignments: &[usize],
    centroids: &[EmbeddingVector],
) -> f64 {
    docs.iter()
        .zip(assignments)
        .map(|(d, &a)| 1.0 - d.dot(&centroids[a]).expect("dims checked"))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::seeded_unit_vector;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn rec(id: &str, v: &[f64], is_pot: bool) -> EmbeddingRecord {
        EmbeddingRecord {
            id: id.into(),
            vector: ev(v),
            is_pot,
        }
    }

    fn tiny_memory(k: usize) -> AugmentedMemory {
        AugmentedMemory::new(
            vec![rec("doc:a", &[1.0, 0.0], false), rec("pot:x", &[0.0, 1.0], true)],
            k,
        )
        .unwrap()
    }

    #[test]
    fn retrieve_orders_and_flags() {
        let m = tiny_memory(2);
        let obs = m.retrieve(&ev(&[1.0, 0.0]), 0).unwrap();
        assert_eq!(obs.retrieved.len(), 2);
        assert_eq!(obs.retrieved[0].id, "doc:a");
        assert!((obs.retrieved[0].similarity - 1.0).abs() <= 1e-12);
        assert!(!obs.retrieved[0].is_pot);
        assert_eq!(obs.retrieved[1].id, "pot:x");
        assert!(obs.retrieved[1].is_pot);
        assert!(obs.retrieved[0].similarity >= obs.retrieved[1].similarity);
    }

    #[test]
    fn retrieve_tie_prefers_earlier_doc() {
        // Three entries equidistant from the query.
        let m = AugmentedMemory::new(
            vec![
                rec("a", &[1.0, 0.0, 0.0], false),
                rec("b", &[0.0, 1.0, 0.0], false),
                rec("c", &[0.0, 0.0, 1.0], false),
            ],
            2,
        )
        .unwrap();
        let q = ev(&[1.0, 1.0, 1.0]);
        let obs = m.retrieve(&q, 3).unwrap();
        let ids: Vec<&str> = obs.retrieved.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(obs.round_index, 3);
    }

    #[test]
    fn retrieve_k_larger_than_memory() {
        let m = tiny_memory(10);
        let obs = m.retrieve(&ev(&[1.0, 1.0]), 0).unwrap();
        assert_eq!(obs.retrieved.len(), 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = AugmentedMemory::new(
            vec![rec("a", &[1.0, 0.0], false), rec("a", &[0.0, 1.0], false)],
            2,
        );
        assert!(matches!(r, Err(MempotError::InvalidArgument(_))));
    }

    #[test]
    fn ingestion_normalizes() {
        let m = AugmentedMemory::new(vec![rec("a", &[3.0, 4.0], false)], 1).unwrap();
        assert!((m.docs()[0].vector.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn inject_empty_is_identity() {
        let m = tiny_memory(2);
        let m2 = m.inject_pots(&[]).unwrap();
        assert_eq!(m2.len(), m.len());
        assert_eq!(m2.records(), m.records());
    }

    #[test]
    fn inject_assigns_fresh_ids_and_keeps_docs() {
        let m = tiny_memory(2);
        let m2 = m.inject_pots(&[ev(&[1.0, 1.0]), ev(&[-1.0, 0.5])]).unwrap();
        assert_eq!(m2.docs().len(), 1);
        assert_eq!(m2.pots().len(), 3);
        let ids: Vec<&str> = m2.pots().iter().map(|p| p.id.as_str()).collect();
        // "pot:x" existed; fresh ids skip nothing here but stay unique.
        assert_eq!(ids, vec!["pot:x", "pot:0", "pot:1"]);
        assert!(m2.pots().iter().all(|p| p.is_pot));
        assert!((m2.pots()[1].vector.norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn inject_skips_colliding_ids() {
        let m = AugmentedMemory::new(
            vec![rec("doc", &[1.0, 0.0], false), rec("pot:0", &[0.0, 1.0], true)],
            2,
        )
        .unwrap();
        let m2 = m.inject_pots(&[ev(&[1.0, 1.0])]).unwrap();
        let ids: Vec<&str> = m2.pots().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["pot:0", "pot:1"]);
    }

    #[test]
    fn pot_count_examples() {
        assert_eq!(pot_count_for_ratio(0.02, 20_000).unwrap(), 408);
        let ratio = 408.0 / 20_408.0;
        assert!(ratio >= 0.019 && ratio <= 0.021);

        assert_eq!(pot_count_for_ratio(0.04, 300).unwrap(), 12);
        assert!(pot_count_for_ratio(0.0, 10).is_err());
        assert!(pot_count_for_ratio(0.5, 10).is_err());
        // Tiny stores still get one pot.
        assert_eq!(pot_count_for_ratio(0.02, 10).unwrap(), 1);
    }

    #[test]
    fn kmeans_singletons() {
        let docs: Vec<EmbeddingVector> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                ev(&v)
            })
            .collect();
        let c = balanced_kmeans(&docs, 4, 9, 20).unwrap();
        assert_eq!(c.cluster_sizes(), vec![1, 1, 1, 1]);
        for (i, &a) in c.assignments.iter().enumerate() {
            let sim = docs[i].dot(&c.centroids[a]).unwrap();
            assert!((sim - 1.0).abs() <= 1e-9, "centroid equals its doc");
        }
    }

    #[test]
    fn kmeans_two_blobs_pure() {
        let mut docs = Vec::new();
        let a = seeded_unit_vector(1, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let b = {
            // Direction roughly opposite to a.
            let neg: Vec<f64> = a.components().iter().map(|c| -c).collect();
            ev(&neg)
        };
        for _ in 0..10 {
            docs.push(crate::embedding::jittered_unit(&a, 0.1, &mut rng));
        }
        for _ in 0..10 {
            docs.push(crate::embedding::jittered_unit(&b, 0.1, &mut rng));
        }
        let c = balanced_kmeans(&docs, 2, 5, 30).unwrap();
        assert_eq!(c.cluster_sizes(), vec![10, 10]);
        let first = c.assignments[0];
        assert!(c.assignments[..10].iter().all(|&x| x == first));
        assert!(c.assignments[10..].iter().all(|&x| x != first));
    }

    #[test]
    fn kmeans_balance_uneven() {
        let docs: Vec<EmbeddingVector> = (0..7)
            .map(|i| seeded_unit_vector(i as u64, 6).unwrap())
            .collect();
        let c = balanced_kmeans(&docs, 2, 3, 15).unwrap();
        let mut sizes = c.cluster_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 4]);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let docs = vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])];
        assert!(balanced_kmeans(&docs, 0, 1, 5).is_err());
        assert!(balanced_kmeans(&docs, 3, 1, 5).is_err());
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let docs: Vec<EmbeddingVector> = (0..40)
            .map(|i| seeded_unit_vector(1000 + i as u64, 12).unwrap())
            .collect();
        let c = balanced_kmeans(&docs, 5, 17, 25).unwrap();
        for w in c.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace must not increase: {:?}", w);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn inject_preserves_docs_and_counts(extra in 0usize..6, seed in 0u64..500) {
            let m = AugmentedMemory::new(
                (0..5)
                    .map(|i| EmbeddingRecord {
                        id: format!("d{i}"),
                        vector: seeded_unit_vector(seed + i as u64, 6).unwrap(),
                        is_pot: false,
                    })
                    .collect(),
                4,
            )
            .unwrap();
            let pots: Vec<EmbeddingVector> = (0..extra)
                .map(|i| seeded_unit_vector(9000 + seed + i as u64, 6).unwrap())
                .collect();
            let m2 = m.inject_pots(&pots).unwrap();
            prop_assert_eq!(m2.docs().len(), 5);
            prop_assert_eq!(m2.pots().len(), extra);
            prop_assert_eq!(m2.docs(), m.docs());
        }

        #[test]
        fn kmeans_sizes_within_one(n in 4usize..40, k in 1usize..6, seed in 0u64..200) {
            prop_assume!(k <= n);
            let docs: Vec<EmbeddingVector> = (0..n)
                .map(|i| seeded_unit_vector(seed * 1000 + i as u64, 8).unwrap())
                .collect();
            let c = balanced_kmeans(&docs, k, seed, 10).unwrap();
            let sizes = c.cluster_sizes();
            let (mn, mx) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(mx - mn <= 1);
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }
}
