//! Bundled synthetic scenario: clustered documents on the unit sphere,
//! a few off-manifold attacker caps, attacker sessions that mix cap
//! probes with benign-looking stealth rounds, and plain benign
//! sessions. The geometry is tuned so an optimized honeypot layout
//! separates the populations while a single static centroid score does
//! not.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{jittered_unit, seeded_unit_vector, EmbeddingVector};
use crate::error::{MempotError, Result};
use crate::io::EmbeddingRecord;
use crate::memory::{balanced_kmeans, AugmentedMemory, ClusterAssignment};
use crate::optimizer::{optimize, OptimizeOutcome, PotParams, PotTrainConfig};
use crate::rng::substream_seed;
use crate::simulate::{benign_sampler, Trajectory, TrajectoryLabel, TrajectorySource};
use crate::sprt::{LlrEstimator, SprtConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub num_clusters: usize,
    pub docs_per_cluster: usize,
    pub doc_spread: f64,
    pub num_caps: usize,
    /// Blend weight pulling each cap off its source cluster center;
    /// 0 keeps caps on the manifold, 1 makes them fully random.
    pub cap_offset: f64,
    pub attacker_spread: f64,
    pub benign_spread: f64,
    /// Fraction of attacker rounds disguised as benign queries.
    pub stealth_mix: f64,
    /// Jitter applied to cap probes when sampling pot-training
    /// positives. Wider than attacker_spread on purpose: the noise
    /// lets pots still parked at their cluster centroid win occasional
    /// selections, so the whole group migrates to the cap instead of
    /// only the first lucky pot.
    pub train_query_jitter: f64,
    pub retrieval_k: usize,
    pub rounds: usize,
    pub sessions_per_side: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dim: 32,
            num_clusters: 20,
            docs_per_cluster: 50,
            doc_spread: 0.1,
            num_caps: 4,
            cap_offset: 0.65,
            attacker_spread: 0.05,
            benign_spread: 0.1,
            stealth_mix: 0.2,
            train_query_jitter: 0.2,
            retrieval_k: 4,
            rounds: 64,
            sessions_per_side: 500,
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(MempotError::invalid_argument("dim must be >= 2"));
        }
        if self.num_clusters == 0 || self.docs_per_cluster == 0 {
            return Err(MempotError::invalid_argument(
                "num_clusters and docs_per_cluster must be >= 1",
            ));
        }
        if self.num_caps == 0 || self.num_caps > self.num_clusters {
            return Err(MempotError::invalid_argument(format!(
                "num_caps must lie in 1..={}, got {}",
                self.num_clusters, self.num_caps
            )));
        }
        for (name, v) in [
            ("doc_spread", self.doc_spread),
            ("attacker_spread", self.attacker_spread),
            ("benign_spread", self.benign_spread),
            ("train_query_jitter", self.train_query_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MempotError::invalid_argument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.cap_offset >= 0.0 && self.cap_offset <= 1.0) {
            return Err(MempotError::invalid_argument(format!(
                "cap_offset must lie in [0, 1], got {}",
                self.cap_offset
            )));
        }
        if !(self.stealth_mix >= 0.0 && self.stealth_mix < 1.0) {
            return Err(MempotError::invalid_argument(format!(
                "stealth_mix must lie in [0, 1), got {}",
                self.stealth_mix
            )));
        }
        if self.retrieval_k == 0 {
            return Err(MempotError::invalid_argument("retrieval_k must be >= 1"));
        }
        if self.rounds == 0 || self.sessions_per_side == 0 {
            return Err(MempotError::invalid_argument(
                "rounds and sessions_per_side must be >= 1",
            ));
        }
        Ok(())
    }
}

/// A fully built scenario: document memory (no pots yet), its balanced
/// clustering, and the attacker cap directions.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub memory: AugmentedMemory,
    pub clusters: ClusterAssignment,
    pub caps: Vec<EmbeddingVector>,
    centers: Vec<EmbeddingVector>,
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let centers: Vec<EmbeddingVector> = (0..config.num_clusters)
        .map(|i| {
            seeded_unit_vector(
                substream_seed(config.seed, "scenario-center", i as u64),
                config.dim,
            )
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(config.num_clusters * config.docs_per_cluster);
    for (ci, center) in centers.iter().enumerate() {
        let mut rng =
            ChaCha12Rng::seed_from_u64(substream_seed(config.seed, "scenario-docs", ci as u64));
        for j in 0..config.docs_per_cluster {
            let vector = if config.doc_spread == 0.0 {
                center.clone()
            } else {
                jittered_unit(center, config.doc_spread, &mut rng)
            };
            records.push(EmbeddingRecord {
                id: format!("doc:{ci}:{j}"),
                vector,
                is_pot: false,
            });
        }
    }
    let memory = AugmentedMemory::new(records, config.retrieval_k)?;
    let clusters = balanced_kmeans(
        &memory.doc_vectors(),
        config.num_clusters,
        substream_seed(config.seed, "scenario-kmeans", 0),
        25,
    )?;

    let caps = caps_from_centers(config, &centers)?;

    Ok(Scenario {
        config: config.clone(),
        memory,
        clusters,
        caps,
        centers,
    })
}

fn caps_from_centers(
    config: &ScenarioConfig,
    centers: &[EmbeddingVector],
) -> Result<Vec<EmbeddingVector>> {
    (0..config.num_caps)
        .map(|j| {
            let random = seeded_unit_vector(
                substream_seed(config.seed, "scenario-cap", j as u64),
                config.dim,
            )?;
            // Orthogonalize the escape direction against the source
            // center so cos(cap, center) is exactly
            // (1-offset)/hypot(1-offset, offset) and caps never land
            // back inside a cluster by chance.
            let along = random.dot(&centers[j])?;
            let escape: Vec<f64> = random
                .components()
                .iter()
                .zip(centers[j].components())
                .map(|(r, c)| r - along * c)
                .collect();
            let escape = EmbeddingVector::new(escape)?.normalized()?;
            let blend: Vec<f64> = centers[j]
                .components()
                .iter()
                .zip(escape.components())
                .map(|(c, e)| (1.0 - config.cap_offset) * c + config.cap_offset * e)
                .collect();
            EmbeddingVector::new(blend)?.normalized()
        })
        .collect()
}

/// Builds the scenario machinery on top of an externally supplied
/// document corpus: clusters come from balanced k-means and the cap
/// sources are the cluster centroids instead of generated centers.
pub fn build_scenario_from_records(
    config: &ScenarioConfig,
    records: Vec<EmbeddingRecord>,
) -> Result<Scenario> {
    config.validate()?;
    if records.iter().any(|r| r.is_pot) {
        return Err(MempotError::invalid_argument(
            "external corpus must contain documents only, found pot records",
        ));
    }
    let memory = AugmentedMemory::new(records, config.retrieval_k)?;
    if memory.dim() != config.dim {
        return Err(MempotError::Dimension {
            expected: config.dim,
            got: memory.dim(),
        });
    }
    let clusters = balanced_kmeans(
        &memory.doc_vectors(),
        config.num_clusters,
        substream_seed(config.seed, "scenario-kmeans", 0),
        25,
    )?;
    let centers = clusters.centroids.clone();
    let caps = caps_from_centers(config, &centers)?;
    Ok(Scenario {
        config: config.clone(),
        memory,
        clusters,
        caps,
        centers,
    })
}

impl Scenario {
    pub fn centers(&self) -> &[EmbeddingVector] {
        &self.centers
    }

    fn benign_query(&self, rng: &mut ChaCha12Rng) -> EmbeddingVector {
        let cluster = rng.random_range(0..self.clusters.centroids.len());
        let centroid = &self.clusters.centroids[cluster];
        if self.config.benign_spread == 0.0 {
            centroid.clone()
        } else {
            jittered_unit(centroid, self.config.benign_spread, rng)
        }
    }

    fn cap_query(&self, rng: &mut ChaCha12Rng) -> EmbeddingVector {
        let cap = &self.caps[rng.random_range(0..self.caps.len())];
        if self.config.attacker_spread == 0.0 {
            cap.clone()
        } else {
            jittered_unit(cap, self.config.attacker_spread, rng)
        }
    }

    /// One attacker session: i.i.d. cap probes with a stealth_mix
    /// fraction of benign-looking rounds.
    pub fn attacker_trajectory(&self, session: u64) -> Trajectory {
        let seed = substream_seed(self.config.seed, "scenario-attacker", session);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let queries = (0..self.config.rounds)
            .map(|_| {
                if rng.random::<f64>() < self.config.stealth_mix {
                    self.benign_query(&mut rng)
                } else {
                    self.cap_query(&mut rng)
                }
            })
            .collect();
        Trajectory {
            label: TrajectoryLabel::Attacker,
            seed,
            source: TrajectorySource::File,
            queries,
        }
    }

    /// One benign session: the user picks an intent cluster and stays
    /// near its centroid.
    pub fn benign_trajectory(&self, session: u64) -> Result<Trajectory> {
        let intent_seed = substream_seed(self.config.seed, "scenario-benign-intent", session);
        let intent =
            ChaCha12Rng::seed_from_u64(intent_seed).random_range(0..self.clusters.centroids.len());
        benign_sampler(
            &self.clusters,
            intent,
            self.config.rounds,
            self.config.benign_spread,
            substream_seed(self.config.seed, "scenario-benign", session),
        )
    }

    /// All labeled sessions, attackers first.
    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(2 * self.config.sessions_per_side);
        for s in 0..self.config.sessions_per_side as u64 {
            out.push(self.attacker_trajectory(s));
        }
        for s in 0..self.config.sessions_per_side as u64 {
            out.push(self.benign_trajectory(s)?);
        }
        Ok(out)
    }

    /// Training-time attacker sampler: pure cap probes under the wider
    /// training jitter. Stealth rounds are session camouflage, not
    /// part of the seed-query set the defender trains against.
    pub fn attacker_sampler(&self) -> impl FnMut(&mut ChaCha12Rng) -> Result<EmbeddingVector> + '_ {
        move |rng: &mut ChaCha12Rng| {
            let cap = &self.caps[rng.random_range(0..self.caps.len())];
            if self.config.train_query_jitter == 0.0 {
                Ok(cap.clone())
            } else {
                Ok(jittered_unit(cap, self.config.train_query_jitter, rng))
            }
        }
    }

    pub fn benign_training_sampler(
        &self,
    ) -> impl FnMut(&mut ChaCha12Rng) -> Result<EmbeddingVector> + '_ {
        move |rng: &mut ChaCha12Rng| Ok(self.benign_query(rng))
    }

    /// Pot training defaults sized to the scenario: several pots per
    /// cluster centroid so a cap can capture a full retrieval set.
    pub fn default_pot_config(&self) -> PotTrainConfig {
        PotTrainConfig {
            num_pots: 4 * self.clusters.centroids.len(),
            retrieval_k: self.config.retrieval_k,
            // The per-pot gradient is averaged over groups and divided
            // by k, so each selection moves a pot by only ~1e-3 units;
            // centroid evacuation and cap migration both need a few
            // tenths of total displacement within the step budget.
            learning_rate: 0.5,
            // At the default scale the last pot recruited by each cap
            // competes with documents from foreign clusters; it takes
            // over a thousand steps to pull a full retrieval set.
            steps: 1500,
            seed: substream_seed(self.config.seed, "pot-train", 0),
            ..PotTrainConfig::default()
        }
    }

    /// Seeds pots round-robin on the cluster centroids and trains them
    /// against the scenario's samplers.  The init jitter fans each
    /// cluster's pots out so benign retrieval pressure stays mild and
    /// a few pots start within pulling range of each cap.
    pub fn optimized_pots(&self, config: &PotTrainConfig) -> Result<OptimizeOutcome> {
        let init = PotParams::init_from_centroids(
            &self.clusters.centroids,
            config.num_pots,
            0.2,
            substream_seed(self.config.seed, "pot-init", 0),
        )?;
        let mut attacker = self.attacker_sampler();
        let mut benign = self.benign_training_sampler();
        optimize(&self.memory, init, &mut attacker, &mut benign, config)
    }

    pub fn augmented_memory(&self, pots: &PotParams) -> Result<AugmentedMemory> {
        self.memory.inject_pots(&pots.unit_pots()?)
    }

    /// Detection config matched to the scenario horizon.
    pub fn sprt_config(&self) -> SprtConfig {
        SprtConfig {
            estimator: LlrEstimator::CountRatio,
            max_rounds: self.config.rounds as u32,
            ..SprtConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{attacker_centroid_detector, static_comparison};
    use crate::optimizer::gk_score_detailed;

    /// Shrunk geometry so module tests stay fast; the default config
    /// is exercised by the acceptance suite.
    fn small_config() -> ScenarioConfig {
        ScenarioConfig {
            dim: 16,
            num_clusters: 8,
            docs_per_cluster: 25,
            num_caps: 2,
            sessions_per_side: 60,
            rounds: 32,
            seed: 13,
            ..ScenarioConfig::default()
        }
    }

    fn small_pot_config(s: &Scenario) -> PotTrainConfig {
        PotTrainConfig {
            batch_groups: 16,
            ..s.default_pot_config()
        }
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let config = small_config();
        let a = build_scenario(&config).unwrap();
        let b = build_scenario(&config).unwrap();
        assert_eq!(a.memory.len(), 8 * 25);
        assert_eq!(a.memory.pots().len(), 0);
        assert_eq!(a.caps.len(), 2);
        assert_eq!(a.clusters.centroids.len(), 8);
        assert_eq!(a.memory.doc_vectors(), b.memory.doc_vectors());
        assert_eq!(a.caps, b.caps);
        for cap in &a.caps {
            assert!((cap.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn caps_sit_off_the_document_manifold() {
        let s = build_scenario(&small_config()).unwrap();
        for (j, cap) in s.caps.iter().enumerate() {
            let best_doc = s
                .memory
                .doc_vectors()
                .iter()
                .map(|d| cap.dot(d).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                best_doc < 0.9,
                "cap {j} too close to a document: {best_doc}"
            );
            let center_sim = cap.dot(&s.centers()[j]).unwrap();
            assert!(
                (0.3..0.95).contains(&center_sim),
                "cap {j} center similarity {center_sim}"
            );
        }
    }

    #[test]
    fn attacker_sessions_mix_probes_and_stealth() {
        let s = build_scenario(&small_config()).unwrap();
        let mut probe_rounds = 0usize;
        let mut total = 0usize;
        for session in 0..20u64 {
            let t = s.attacker_trajectory(session);
            assert_eq!(t.label, TrajectoryLabel::Attacker);
            assert_eq!(t.queries.len(), 32);
            assert_eq!(t, s.attacker_trajectory(session));
            for q in &t.queries {
                assert!((q.norm() - 1.0).abs() < 1e-9);
                let best_cap = s.caps.iter().map(|c| q.dot(c).unwrap()).fold(f64::MIN, f64::max);
                if best_cap > 0.9 {
                    probe_rounds += 1;
                }
                total += 1;
            }
        }
        let probe_frac = probe_rounds as f64 / total as f64;
        assert!(
            (probe_frac - 0.8).abs() < 0.08,
            "probe fraction {probe_frac} far from 1 - stealth_mix"
        );
    }

    #[test]
    fn benign_sessions_stay_near_one_centroid() {
        let s = build_scenario(&small_config()).unwrap();
        let t = s.benign_trajectory(3).unwrap();
        assert_eq!(t.label, TrajectoryLabel::Benign);
        let best_centroid = s
            .clusters
            .centroids
            .iter()
            .map(|c| {
                t.queries.iter().map(|q| q.dot(c).unwrap()).sum::<f64>() / t.queries.len() as f64
            })
            .fold(f64::MIN, f64::max);
        assert!(best_centroid > 0.85, "mean centroid similarity {best_centroid}");
    }

    #[test]
    fn training_parks_several_pots_on_every_cap() {
        let s = build_scenario(&small_config()).unwrap();
        let out = s.optimized_pots(&small_pot_config(&s)).unwrap();
        let units = out.params.unit_pots().unwrap();
        let docs = s.memory.doc_vectors();
        for (j, cap) in s.caps.iter().enumerate() {
            let g = gk_score_detailed(cap, &docs, &units, s.config.retrieval_k).unwrap();
            assert!(
                g.selected_pots.len() >= 3,
                "cap {j} captured only {} pots in its top-{}",
                g.selected_pots.len(),
                s.config.retrieval_k
            );
        }
        // Benign-side check: centroid queries must retrieve no pots.
        for centroid in &s.clusters.centroids {
            let g = gk_score_detailed(centroid, &docs, &units, s.config.retrieval_k).unwrap();
            assert!(
                g.selected_pots.is_empty(),
                "a cluster centroid still retrieves pots after training"
            );
        }
    }

    #[test]
    fn end_to_end_detection_beats_no_pot_and_static_baselines() {
        let s = build_scenario(&small_config()).unwrap();
        let out = s.optimized_pots(&small_pot_config(&s)).unwrap();
        let augmented = s.augmented_memory(&out.params).unwrap();
        let trajectories = s.trajectories().unwrap();
        let sprt = s.sprt_config();

        let detector = attacker_centroid_detector(&trajectories).unwrap();
        let report =
            static_comparison(&s.memory, &augmented, &trajectories, &sprt, detector).unwrap();

        assert!(
            report.with_pots.auroc >= 0.9,
            "augmented auroc {}",
            report.with_pots.auroc
        );
        assert!(
            report.without_pots.auroc <= 0.75,
            "bare auroc {}",
            report.without_pots.auroc
        );
        assert!(
            report.with_pots.mean_attacker_decision_rounds
                <= report.without_pots.mean_attacker_decision_rounds,
            "augmented rounds {} vs bare {}",
            report.with_pots.mean_attacker_decision_rounds,
            report.without_pots.mean_attacker_decision_rounds
        );
        assert!(
            report.with_pots.mean_attacker_decision_rounds
                <= report.static_fixed.mean_attacker_decision_rounds,
            "augmented rounds {} vs static {}",
            report.with_pots.mean_attacker_decision_rounds,
            report.static_fixed.mean_attacker_decision_rounds
        );
        assert!(report.with_pots.attacker_detection_rate > 0.85);
    }
}
