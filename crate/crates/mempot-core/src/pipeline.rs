//! End-to-end orchestration: build or load the corpus, cluster it,
//! train pots, optionally decode pot text, simulate sessions, evaluate
//! against the baselines, and write config-hash-stamped artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{apply_thread_cap, config_hash, RunConfig};
use crate::error::{MempotError, Result};
use crate::eval::{
    attacker_centroid_detector, compute_metrics, roc_points, run_sessions, static_comparison,
    ComparisonReport, MetricsReport,
};
use crate::inversion::{beam_search_invert, DecodingConfig, ScorerWeights, ToyBackends};
use crate::io::{atomic_write, read_embeddings, read_token_file, write_trajectories};
use crate::memory::pot_count_for_ratio;
use crate::optimizer::OptimizeOutcome;
use crate::rng::substream_seed;
use crate::scenario::{build_scenario, build_scenario_from_records, Scenario};
use crate::simulate::TrajectoryLabel;

pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POTS_FILE: &str = "pots.ndjson";
pub const TRAJECTORIES_FILE: &str = "trajectories.ndjson";
pub const TRACE_FILE: &str = "trace.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const POT_TEXTS_FILE: &str = "pot_texts.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub docs: usize,
    pub dim: usize,
    pub clusters: usize,
    pub pot_count: usize,
    /// Achieved |pots| / (|docs| + |pots|).
    pub pot_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub nce_initial: f64,
    pub nce_final: f64,
    pub total_initial: f64,
    pub total_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotText {
    pub pot_id: String,
    pub text: String,
    pub score: f64,
    pub emb_similarity: f64,
}

/// Wall-clock seconds per stage. The only non-deterministic part of
/// the report; comparisons for reproducibility must ignore it (and the
/// measured mean_delay_s inside metrics).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingSummary {
    pub corpus_s: f64,
    pub optimize_s: f64,
    pub invert_s: f64,
    pub simulate_s: f64,
    pub evaluate_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub global_seed: u64,
    /// Effective configuration with all defaults filled in.
    pub config: RunConfig,
    pub corpus: CorpusSummary,
    pub training: TrainingSummary,
    pub comparison: ComparisonReport,
    /// Metrics for the honeypot-augmented sequential arm.
    pub metrics: MetricsReport,
    pub inverted_pots: usize,
    pub timing: TimingSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    global_seed: u64,
    artifacts: Vec<&'a str>,
}

fn stage<T>(name: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| MempotError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn build_corpus(config: &RunConfig) -> Result<Scenario> {
    let scenario_config = config.scenario_config();
    match &config.paths.docs {
        None => build_scenario(&scenario_config),
        Some(path) => {
            let records = read_embeddings(path)?;
            build_scenario_from_records(&scenario_config, records)
        }
    }
}

fn invert_pots(
    config: &RunConfig,
    scenario: &Scenario,
    pots: &[(String, crate::embedding::EmbeddingVector)],
) -> Result<Vec<PotText>> {
    let Some(lexicon_path) = &config.paths.safety_lexicon else {
        return Ok(Vec::new());
    };
    let safety = read_token_file(lexicon_path)?;
    let mut vocab = safety.clone();
    vocab.sort_unstable();
    vocab.dedup();
    let backend = ToyBackends::new(
        vocab,
        config.dim,
        substream_seed(config.global_seed, "invert-backend", 0),
    )?;
    let weights = ScorerWeights::default();
    let decoding = DecodingConfig::default();
    let docs = scenario.memory.doc_vectors();
    pots.par_iter()
        .map(|(id, vector)| {
            let res = beam_search_invert(vector, &safety, &docs, &weights, &decoding, &backend)?;
            let text = res
                .tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            Ok(PotText {
                pot_id: id.clone(),
                text,
                score: res.score,
                emb_similarity: res.emb_similarity,
            })
        })
        .collect()
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "{header}")?;
        for row in rows {
            let line = row
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

/// Runs cluster -> optimize -> (optional) invert -> simulate ->
/// evaluate and writes all artifacts under `paths.out_dir`. Inputs are
/// validated and all computation finishes before anything is written,
/// so a failed run leaves no partial artifacts.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineReport> {
    let total_start = Instant::now();
    config.validate()?;
    apply_thread_cap()?;
    let hash = config_hash(config)?;

    let corpus_start = Instant::now();
    let scenario = stage("corpus", build_corpus(config))?;
    let corpus_s = corpus_start.elapsed().as_secs_f64();

    let optimize_start = Instant::now();
    let doc_count = scenario.memory.docs().len();
    let (outcome, augmented) = stage("optimize", {
        (|| -> Result<(OptimizeOutcome, _)> {
            let num_pots = pot_count_for_ratio(config.pot_ratio, doc_count)?;
            let train = config.pot_train.to_train_config(
                num_pots,
                config.retrieval_k,
                substream_seed(config.global_seed, "pot-train", 0),
            );
            let outcome = scenario.optimized_pots(&train)?;
            let augmented = scenario.augmented_memory(&outcome.params)?;
            Ok((outcome, augmented))
        })()
    })?;
    let optimize_s = optimize_start.elapsed().as_secs_f64();

    let pot_records: Vec<(String, crate::embedding::EmbeddingVector)> = augmented
        .pots()
        .iter()
        .map(|e| (e.id.clone(), e.vector.clone()))
        .collect();

    let invert_start = Instant::now();
    let pot_texts = stage("invert", invert_pots(config, &scenario, &pot_records))?;
    let invert_s = invert_start.elapsed().as_secs_f64();

    let simulate_start = Instant::now();
    let trajectories = stage("simulate", scenario.trajectories())?;
    let simulate_s = simulate_start.elapsed().as_secs_f64();

    let evaluate_start = Instant::now();
    let (comparison, metrics, roc) = stage("evaluate", {
        (|| {
            let detector = attacker_centroid_detector(&trajectories)?;
            let comparison = static_comparison(
                &scenario.memory,
                &augmented,
                &trajectories,
                &config.sprt,
                detector,
            )?;
            let outcomes = run_sessions(&augmented, &trajectories, &config.sprt)?;
            let metrics = compute_metrics(&outcomes, config.sprt.max_rounds)?;
            let mut attackers = Vec::new();
            let mut benign = Vec::new();
            for o in &outcomes {
                match o.label {
                    TrajectoryLabel::Attacker => attackers.push(o.score),
                    TrajectoryLabel::Benign => benign.push(o.score),
                }
            }
            let roc = roc_points(&attackers, &benign)?;
            Ok((comparison, metrics, roc))
        })()
    })?;
    let evaluate_s = evaluate_start.elapsed().as_secs_f64();

    let report = PipelineReport {
        config_hash: hash.clone(),
        global_seed: config.global_seed,
        config: config.clone(),
        corpus: CorpusSummary {
            docs: doc_count,
            dim: scenario.memory.dim(),
            clusters: scenario.clusters.centroids.len(),
            pot_count: pot_records.len(),
            pot_ratio: augmented.pot_ratio(),
        },
        training: TrainingSummary {
            steps: config.pot_train.steps,
            nce_initial: outcome.trace.first().map(|r| r.nce_loss).unwrap_or(f64::NAN),
            nce_final: outcome.trace.last().map(|r| r.nce_loss).unwrap_or(f64::NAN),
            total_initial: outcome.trace.first().map(|r| r.total_loss).unwrap_or(f64::NAN),
            total_final: outcome.trace.last().map(|r| r.total_loss).unwrap_or(f64::NAN),
        },
        comparison,
        metrics,
        inverted_pots: pot_texts.len(),
        timing: TimingSummary {
            corpus_s,
            optimize_s,
            invert_s,
            simulate_s,
            evaluate_s,
            total_s: total_start.elapsed().as_secs_f64(),
        },
    };

    stage(
        "write",
        write_artifacts(config, &hash, &report, &augmented, &trajectories, &outcome, &roc, &pot_texts),
    )?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn write_artifacts(
    config: &RunConfig,
    hash: &str,
    report: &PipelineReport,
    augmented: &crate::memory::AugmentedMemory,
    trajectories: &[crate::simulate::Trajectory],
    outcome: &OptimizeOutcome,
    roc: &[(f64, f64, f64)],
    pot_texts: &[PotText],
) -> Result<()> {
    let out_dir = &config.paths.out_dir;
    fs::create_dir_all(out_dir)?;

    let pot_records: Vec<crate::io::EmbeddingRecord> = augmented
        .pots()
        .iter()
        .map(|e| crate::io::EmbeddingRecord {
            id: e.id.clone(),
            vector: e.vector.clone(),
            is_pot: true,
        })
        .collect();
    crate::io::write_embeddings_ndjson(&out_dir.join(POTS_FILE), &pot_records)?;

    write_trajectories(&out_dir.join(TRAJECTORIES_FILE), trajectories)?;

    let trace_rows: Vec<Vec<f64>> = outcome
        .trace
        .iter()
        .map(|r| vec![r.step as f64, r.nce_loss, r.div_loss, r.total_loss])
        .collect();
    write_csv(
        &out_dir.join(TRACE_FILE),
        "step,nce_loss,div_loss,total_loss",
        &trace_rows,
    )?;

    let roc_rows: Vec<Vec<f64>> = roc.iter().map(|(t, f, p)| vec![*t, *f, *p]).collect();
    write_csv(&out_dir.join(ROC_FILE), "threshold,fpr,tpr", &roc_rows)?;

    if !pot_texts.is_empty() {
        atomic_write(&out_dir.join(POT_TEXTS_FILE), |w| {
            for t in pot_texts {
                serde_json::to_writer(&mut *w, t)?;
                writeln!(w)?;
            }
            Ok(())
        })?;
    }

    write_json(&out_dir.join(REPORT_FILE), report)?;

    let mut artifacts = vec![POTS_FILE, TRAJECTORIES_FILE, TRACE_FILE, ROC_FILE, REPORT_FILE];
    if !pot_texts.is_empty() {
        artifacts.push(POT_TEXTS_FILE);
    }
    artifacts.sort_unstable();
    write_json(
        &out_dir.join(MANIFEST_FILE),
        &Manifest {
            config_hash: hash,
            global_seed: config.global_seed,
            artifacts,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::EmbeddingRecord;

    fn fast_config(out_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::synthetic(out_dir);
        cfg.dim = 16;
        cfg.scenario.num_clusters = 8;
        cfg.scenario.docs_per_cluster = 25;
        cfg.scenario.num_caps = 2;
        cfg.simulate.rounds = 32;
        cfg.simulate.sessions = 30;
        // 0.14/(1-0.14)*200 docs = 32 pots, four per cluster.
        cfg.pot_ratio = 0.14;
        cfg.pot_train.learning_rate = 0.5;
        cfg.pot_train.steps = 400;
        cfg.pot_train.batch_groups = 16;
        cfg.sprt.max_rounds = 32;
        cfg.global_seed = 13;
        cfg
    }

    #[test]
    fn pipeline_writes_stamped_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = fast_config(&out);
        let report = run_pipeline(&cfg).unwrap();

        for name in [REPORT_FILE, MANIFEST_FILE, POTS_FILE, TRAJECTORIES_FILE, TRACE_FILE, ROC_FILE]
        {
            assert!(out.join(name).is_file(), "missing artifact {name}");
        }
        assert!(!out.join(POT_TEXTS_FILE).exists(), "invert stage should be skipped");

        assert_eq!(report.config_hash, config_hash(&cfg).unwrap());
        assert_eq!(report.corpus.docs, 200);
        assert_eq!(report.corpus.pot_count, 32);
        assert!(report.corpus.pot_ratio > 0.13 && report.corpus.pot_ratio < 0.15);
        assert_eq!(report.inverted_pots, 0);
        assert!(report.training.nce_final < report.training.nce_initial);
        assert!(report.metrics.auroc >= 0.8, "auroc {}", report.metrics.auroc);

        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["config_hash"], report.config_hash.as_str());
        assert!(manifest["artifacts"].as_array().unwrap().len() >= 5);

        let report_json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report_json["config_hash"], report.config_hash.as_str());
        assert_eq!(report_json["config"]["dim"], 16);

        let trace = fs::read_to_string(out.join(TRACE_FILE)).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some("step,nce_loss,div_loss,total_loss"));
        assert_eq!(lines.count(), cfg.pot_train.steps);

        let pots = read_embeddings(&out.join(POTS_FILE)).unwrap();
        assert_eq!(pots.len(), 32);
        assert!(pots.iter().all(|p| p.is_pot && p.id.starts_with("pot:")));
    }

    fn strip_timing(mut v: serde_json::Value) -> serde_json::Value {
        if let Some(map) = v.as_object_mut() {
            map.remove("timing");
            if let Some(metrics) = map.get_mut("metrics").and_then(|m| m.as_object_mut()) {
                metrics.remove("mean_delay_s");
            }
        }
        v
    }

    #[test]
    fn rerun_is_identical_modulo_timing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = fast_config(&out);
        cfg.pot_train.steps = 50;
        cfg.simulate.sessions = 10;

        run_pipeline(&cfg).unwrap();
        let deterministic = [POTS_FILE, TRAJECTORIES_FILE, TRACE_FILE, ROC_FILE, MANIFEST_FILE];
        let first: Vec<Vec<u8>> = deterministic
            .iter()
            .map(|n| fs::read(out.join(n)).unwrap())
            .collect();
        let first_report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();

        run_pipeline(&cfg).unwrap();
        for (name, bytes) in deterministic.iter().zip(&first) {
            assert_eq!(&fs::read(out.join(name)).unwrap(), bytes, "{name} changed across reruns");
        }
        let second_report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(strip_timing(first_report), strip_timing(second_report));
    }

    #[test]
    fn invert_stage_decodes_every_pot() {
        let dir = tempfile::tempdir().unwrap();
        let lexicon = dir.path().join("safety.txt");
        fs::write(&lexicon, "1 2 3 4 5 6 7 8").unwrap();
        let out = dir.path().join("run");
        let mut cfg = fast_config(&out);
        cfg.pot_train.steps = 20;
        cfg.simulate.sessions = 5;
        cfg.pot_ratio = 0.02; // 4 pots on 200 docs
        cfg.paths.safety_lexicon = Some(lexicon);

        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.corpus.pot_count, 4);
        assert_eq!(report.inverted_pots, 4);

        let body = fs::read_to_string(out.join(POT_TEXTS_FILE)).unwrap();
        let rows: Vec<serde_json::Value> = body
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r["pot_id"].as_str().unwrap().starts_with("pot:"));
            assert!(!r["text"].as_str().unwrap().is_empty());
            assert!(r["emb_similarity"].as_f64().unwrap().is_finite());
        }
    }

    #[test]
    fn missing_input_leaves_no_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut cfg = fast_config(&out);
        cfg.paths.docs = Some(dir.path().join("absent.ndjson"));
        assert!(run_pipeline(&cfg).is_err());
        assert!(!out.exists(), "failed run must not create the out dir");
    }

    #[test]
    fn external_corpus_drives_the_run() {
        use crate::embedding::{jittered_unit, seeded_unit_vector};
        use rand::SeedableRng;

        let dir = tempfile::tempdir().unwrap();
        let docs_path = dir.path().join("docs.ndjson");
        let mut records = Vec::new();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for c in 0..3 {
            let center = seeded_unit_vector(100 + c, 16).unwrap();
            for j in 0..20 {
                records.push(EmbeddingRecord {
                    id: format!("d{c}:{j}"),
                    vector: jittered_unit(&center, 0.1, &mut rng),
                    is_pot: false,
                });
            }
        }
        crate::io::write_embeddings_ndjson(&docs_path, &records).unwrap();

        let out = dir.path().join("run");
        let mut cfg = fast_config(&out);
        cfg.paths.docs = Some(docs_path);
        cfg.scenario.num_clusters = 3;
        cfg.scenario.num_caps = 1;
        cfg.pot_ratio = 0.1;
        cfg.pot_train.steps = 30;
        cfg.simulate.sessions = 5;

        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.corpus.docs, 60);
        assert_eq!(report.corpus.clusters, 3);
        assert!(out.join(REPORT_FILE).is_file());
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let docs_path = dir.path().join("docs.ndjson");
        // dim 8 corpus against a dim 16 config: corpus stage must fail.
        let records: Vec<EmbeddingRecord> = (0..10)
            .map(|i| EmbeddingRecord {
                id: format!("d{i}"),
                vector: crate::embedding::seeded_unit_vector(i as u64, 8).unwrap(),
                is_pot: false,
            })
            .collect();
        crate::io::write_embeddings_ndjson(&docs_path, &records).unwrap();

        let out = dir.path().join("run");
        let mut cfg = fast_config(&out);
        cfg.paths.docs = Some(docs_path);
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().contains("stage corpus failed"), "{err}");
        assert!(!out.exists());
    }
}
