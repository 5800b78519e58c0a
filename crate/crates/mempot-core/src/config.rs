//! Run-configuration schema shared by the CLI and the pipeline: strict
//! JSON parsing with pointer-tagged errors, range validation, a stable
//! config hash stamped into every artifact, and the parallelism cap.

use std::path::PathBuf;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MempotError, Result};
use crate::optimizer::PotTrainConfig;
use crate::scenario::ScenarioConfig;
use crate::sprt::SprtConfig;

/// Pot-training hyperparameters exposed to run configs. The pot count
/// is derived from `pot_ratio` and the corpus size, and the training
/// seed from `global_seed`, so neither is a free field here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotTrainSection {
    pub nce_group_size: usize,
    pub beta_div: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_groups: usize,
}

impl Default for PotTrainSection {
    fn default() -> Self {
        let base = PotTrainConfig::default();
        PotTrainSection {
            nce_group_size: base.nce_group_size,
            beta_div: base.beta_div,
            learning_rate: base.learning_rate,
            steps: base.steps,
            batch_groups: base.batch_groups,
        }
    }
}

impl PotTrainSection {
    pub fn to_train_config(&self, num_pots: usize, retrieval_k: usize, seed: u64) -> PotTrainConfig {
        PotTrainConfig {
            num_pots,
            nce_group_size: self.nce_group_size,
            retrieval_k,
            beta_div: self.beta_div,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_groups: self.batch_groups,
            seed,
        }
    }
}

/// Session-generation knobs: `jitter` spreads attacker probes around
/// their targets, `spread` spreads benign queries around their intent
/// centroid. `sessions` counts each side, so a run simulates twice
/// that many trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub rounds: usize,
    pub sessions: usize,
    pub jitter: f64,
    pub spread: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            rounds: 64,
            sessions: 100,
            jitter: 0.05,
            spread: 0.1,
        }
    }
}

/// Geometry of the synthetic corpus and its attacker. With an external
/// `paths.docs` file only `num_clusters`, `num_caps`, `cap_offset`,
/// `stealth_mix`, and `train_query_jitter` apply; the docs-per-cluster
/// and spread fields describe generated corpora only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub num_clusters: usize,
    pub docs_per_cluster: usize,
    pub doc_spread: f64,
    pub num_caps: usize,
    pub cap_offset: f64,
    pub stealth_mix: f64,
    pub train_query_jitter: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let base = ScenarioConfig::default();
        ScenarioSection {
            num_clusters: base.num_clusters,
            docs_per_cluster: base.docs_per_cluster,
            doc_spread: base.doc_spread,
            num_caps: base.num_caps,
            cap_offset: base.cap_offset,
            stealth_mix: base.stealth_mix,
            train_query_jitter: base.train_query_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// External document embeddings; the synthetic corpus is generated
    /// when absent.
    #[serde(default)]
    pub docs: Option<PathBuf>,
    /// Safety lexicon for the inversion stage; the stage is skipped
    /// when absent.
    #[serde(default)]
    pub safety_lexicon: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    /// Target fraction of pots in the augmented memory.
    #[serde(default = "default_pot_ratio")]
    pub pot_ratio: f64,
    #[serde(default)]
    pub sprt: SprtConfig,
    #[serde(default)]
    pub pot_train: PotTrainSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    pub paths: PathsSection,
}

fn default_dim() -> usize {
    32
}

fn default_retrieval_k() -> usize {
    4
}

fn default_pot_ratio() -> f64 {
    0.02
}

fn check(cond: bool, pointer: &str, message: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(MempotError::config(pointer, message))
    }
}

fn check_nonneg(value: f64, pointer: &str) -> Result<()> {
    check(
        value.is_finite() && value >= 0.0,
        pointer,
        format!("must be finite and >= 0, got {value}"),
    )
}

impl RunConfig {
    /// A ready-to-run synthetic configuration writing under `out_dir`.
    pub fn synthetic(out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            global_seed: 0,
            dim: default_dim(),
            retrieval_k: default_retrieval_k(),
            pot_ratio: default_pot_ratio(),
            sprt: SprtConfig::default(),
            pot_train: PotTrainSection::default(),
            simulate: SimulateSection::default(),
            scenario: ScenarioSection::default(),
            paths: PathsSection {
                docs: None,
                safety_lexicon: None,
                out_dir: out_dir.into(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.dim >= 2, "/dim", format!("must be >= 2, got {}", self.dim))?;
        check(
            self.retrieval_k >= 1,
            "/retrieval_k",
            "must be >= 1".into(),
        )?;
        check(
            self.pot_ratio.is_finite() && self.pot_ratio > 0.0 && self.pot_ratio < 0.5,
            "/pot_ratio",
            format!("must lie in (0, 0.5), got {}", self.pot_ratio),
        )?;

        for (name, v) in [("alpha", self.sprt.alpha), ("beta", self.sprt.beta)] {
            check(
                v.is_finite() && v > 0.0 && v < 1.0,
                &format!("/sprt/{name}"),
                format!("must lie in (0, 1), got {v}"),
            )?;
        }
        check(
            self.sprt.alpha + self.sprt.beta < 1.0,
            "/sprt",
            "alpha + beta must be < 1 so the boundaries bracket zero".into(),
        )?;
        check(
            self.sprt.eps_cnt > 0.0,
            "/sprt/eps_cnt",
            format!("must be > 0, got {}", self.sprt.eps_cnt),
        )?;
        check(
            self.sprt.eps_sim > 0.0,
            "/sprt/eps_sim",
            format!("must be > 0, got {}", self.sprt.eps_sim),
        )?;
        check(self.sprt.global_k >= 1, "/sprt/global_k", "must be >= 1".into())?;
        check(self.sprt.max_rounds >= 1, "/sprt/max_rounds", "must be >= 1".into())?;

        check(
            self.pot_train.nce_group_size >= 2,
            "/pot_train/nce_group_size",
            "must be >= 2 (one positive plus negatives)".into(),
        )?;
        check(
            self.pot_train.learning_rate.is_finite() && self.pot_train.learning_rate > 0.0,
            "/pot_train/learning_rate",
            format!("must be finite and > 0, got {}", self.pot_train.learning_rate),
        )?;
        check_nonneg(self.pot_train.beta_div, "/pot_train/beta_div")?;
        check(
            self.pot_train.batch_groups >= 1,
            "/pot_train/batch_groups",
            "must be >= 1".into(),
        )?;

        check(self.simulate.rounds >= 1, "/simulate/rounds", "must be >= 1".into())?;
        check(
            self.simulate.sessions >= 1,
            "/simulate/sessions",
            "must be >= 1".into(),
        )?;
        check_nonneg(self.simulate.jitter, "/simulate/jitter")?;
        check_nonneg(self.simulate.spread, "/simulate/spread")?;

        check(
            self.scenario.num_clusters >= 1,
            "/scenario/num_clusters",
            "must be >= 1".into(),
        )?;
        check(
            self.scenario.docs_per_cluster >= 1,
            "/scenario/docs_per_cluster",
            "must be >= 1".into(),
        )?;
        check(
            self.scenario.num_caps >= 1 && self.scenario.num_caps <= self.scenario.num_clusters,
            "/scenario/num_caps",
            format!(
                "must lie in 1..={}, got {}",
                self.scenario.num_clusters, self.scenario.num_caps
            ),
        )?;
        check(
            self.scenario.cap_offset.is_finite()
                && (0.0..=1.0).contains(&self.scenario.cap_offset),
            "/scenario/cap_offset",
            format!("must lie in [0, 1], got {}", self.scenario.cap_offset),
        )?;
        check(
            self.scenario.stealth_mix.is_finite()
                && self.scenario.stealth_mix >= 0.0
                && self.scenario.stealth_mix < 1.0,
            "/scenario/stealth_mix",
            format!("must lie in [0, 1), got {}", self.scenario.stealth_mix),
        )?;
        check_nonneg(self.scenario.doc_spread, "/scenario/doc_spread")?;
        check_nonneg(self.scenario.train_query_jitter, "/scenario/train_query_jitter")?;

        for (field, path) in [
            ("docs", &self.paths.docs),
            ("safety_lexicon", &self.paths.safety_lexicon),
        ] {
            if let Some(p) = path {
                check(
                    p.is_file(),
                    &format!("/paths/{field}"),
                    format!("file not found: {}", p.display()),
                )?;
            }
        }
        Ok(())
    }

    /// Scenario parameters for synthetic-corpus runs, assembled from
    /// the top-level knobs plus the geometry section.
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            dim: self.dim,
            num_clusters: self.scenario.num_clusters,
            docs_per_cluster: self.scenario.docs_per_cluster,
            doc_spread: self.scenario.doc_spread,
            num_caps: self.scenario.num_caps,
            cap_offset: self.scenario.cap_offset,
            attacker_spread: self.simulate.jitter,
            benign_spread: self.simulate.spread,
            stealth_mix: self.scenario.stealth_mix,
            train_query_jitter: self.scenario.train_query_jitter,
            retrieval_k: self.retrieval_k,
            rounds: self.simulate.rounds,
            sessions_per_side: self.simulate.sessions,
            seed: self.global_seed,
        }
    }
}

fn pointer_from_path(path: &serde_path_to_error::Path) -> String {
    let dotted = path.to_string();
    if dotted.is_empty() || dotted == "." {
        return "/".into();
    }
    let mut out = String::new();
    for seg in dotted.split('.') {
        out.push('/');
        out.push_str(seg);
    }
    out
}

/// Parse and fully validate a JSON run config. Unknown keys, type
/// errors, and range violations all report a JSON pointer to the
/// offending field.
pub fn validate_config(raw: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(raw);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        MempotError::config(pointer_from_path(e.path()), e.inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

/// First 16 hex chars of the SHA-256 of the canonical JSON encoding.
/// Stable across runs and platforms; field order is fixed by the
/// struct definition.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Caps the global worker pool from the MEMPOT_THREADS env var.
/// Returns the requested cap, or None when the variable is unset.
/// Only the first call in a process can size the pool; later calls
/// still validate the variable.
pub fn apply_thread_cap() -> Result<Option<usize>> {
    let Some(raw) = std::env::var_os("MEMPOT_THREADS") else {
        return Ok(None);
    };
    let text = raw.to_string_lossy();
    let threads: usize = text.trim().parse().map_err(|_| {
        MempotError::invalid_argument(format!(
            "MEMPOT_THREADS must be a positive integer, got {text:?}"
        ))
    })?;
    if threads == 0 {
        return Err(MempotError::invalid_argument(
            "MEMPOT_THREADS must be a positive integer, got 0",
        ));
    }
    static APPLIED: OnceLock<()> = OnceLock::new();
    APPLIED.get_or_init(|| {
        // Fails when something else already built the pool; the cap is
        // then best-effort, which is fine for a diagnostic knob.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    });
    Ok(Some(threads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(dir: &std::path::Path) -> String {
        format!(r#"{{"paths": {{"out_dir": "{}"}}}}"#, dir.display())
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = validate_config(&minimal(dir.path())).unwrap();
        assert_eq!(cfg.dim, 32);
        assert_eq!(cfg.retrieval_k, 4);
        assert_eq!(cfg.pot_ratio, 0.02);
        assert_eq!(cfg.sprt, SprtConfig::default());
        assert_eq!(cfg.pot_train.steps, PotTrainConfig::default().steps);
        assert_eq!(cfg.simulate.rounds, 64);
        assert_eq!(cfg.scenario.num_clusters, 20);
        assert!(cfg.paths.docs.is_none());
    }

    #[test]
    fn alpha_out_of_range_points_at_field() {
        let dir = tempfile::tempdir().unwrap();
        let raw = format!(
            r#"{{"sprt": {{"alpha": 1.5}}, "paths": {{"out_dir": "{}"}}}}"#,
            dir.path().display()
        );
        let err = validate_config(&raw).unwrap_err();
        match err {
            MempotError::Config { pointer, .. } => assert_eq!(pointer, "/sprt/alpha"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn pot_ratio_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let ok = format!(
            r#"{{"pot_ratio": 0.02, "paths": {{"out_dir": "{}"}}}}"#,
            dir.path().display()
        );
        assert!(validate_config(&ok).is_ok());

        let bad = format!(
            r#"{{"pot_ratio": 0.6, "paths": {{"out_dir": "{}"}}}}"#,
            dir.path().display()
        );
        match validate_config(&bad).unwrap_err() {
            MempotError::Config { pointer, .. } => assert_eq!(pointer, "/pot_ratio"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let raw = format!(
            r#"{{"sprt": {{"alhpa": 0.1}}, "paths": {{"out_dir": "{}"}}}}"#,
            dir.path().display()
        );
        match validate_config(&raw).unwrap_err() {
            MempotError::Config { pointer, message } => {
                assert_eq!(pointer, "/sprt/alhpa");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        assert!(validate_config("{not json").is_err());
    }

    #[test]
    fn missing_docs_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let raw = format!(
            r#"{{"paths": {{"docs": "{}/absent.ndjson", "out_dir": "{}"}}}}"#,
            dir.path().display(),
            dir.path().display()
        );
        match validate_config(&raw).unwrap_err() {
            MempotError::Config { pointer, .. } => assert_eq!(pointer, "/paths/docs"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let a = RunConfig::synthetic("out");
        let b = RunConfig::synthetic("out");
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());

        let mut c = RunConfig::synthetic("out");
        c.global_seed = 1;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());

        let h = config_hash(&a).unwrap();
        assert_eq!(h.len(), 16);
        assert!(h.chars().all(|ch| ch.is_ascii_hexdigit()));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::synthetic("somewhere/out");
        let raw = serde_json::to_string(&cfg).unwrap();
        let back = validate_config(&raw).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn scenario_config_assembly_wires_shared_knobs() {
        let mut cfg = RunConfig::synthetic("out");
        cfg.global_seed = 42;
        cfg.dim = 16;
        cfg.simulate.rounds = 32;
        cfg.simulate.sessions = 60;
        cfg.simulate.jitter = 0.07;
        let sc = cfg.scenario_config();
        assert_eq!(sc.seed, 42);
        assert_eq!(sc.dim, 16);
        assert_eq!(sc.rounds, 32);
        assert_eq!(sc.sessions_per_side, 60);
        assert_eq!(sc.attacker_spread, 0.07);
        assert_eq!(sc.num_clusters, cfg.scenario.num_clusters);
        sc.validate().unwrap();
    }

    #[test]
    fn thread_cap_rejects_garbage() {
        // Serialized through a single test so the env var never races.
        std::env::remove_var("MEMPOT_THREADS");
        assert_eq!(apply_thread_cap().unwrap(), None);

        std::env::set_var("MEMPOT_THREADS", "2");
        assert_eq!(apply_thread_cap().unwrap(), Some(2));

        std::env::set_var("MEMPOT_THREADS", "zero");
        assert!(apply_thread_cap().is_err());

        std::env::set_var("MEMPOT_THREADS", "0");
        assert!(apply_thread_cap().is_err());

        std::env::remove_var("MEMPOT_THREADS");
    }
}
