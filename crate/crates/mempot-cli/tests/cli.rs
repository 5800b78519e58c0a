use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mempot_core::embedding::{seeded_unit_vector, EmbeddingVector};
use mempot_core::io::{write_embeddings_ndjson, EmbeddingRecord};

fn mempot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mempot"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn mempot")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn axis(i: usize, dim: usize) -> EmbeddingVector {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    EmbeddingVector::new(v).unwrap()
}

fn record(id: &str, vector: EmbeddingVector, is_pot: bool) -> EmbeddingRecord {
    EmbeddingRecord {
        id: id.into(),
        vector,
        is_pot,
    }
}

/// Three docs stacked on axis 0, three pots on axis 1.
fn split_memory(dir: &Path) -> (PathBuf, PathBuf) {
    let docs = dir.join("docs.ndjson");
    let pots = dir.join("pots.ndjson");
    let near = |main: usize, off: usize, eps: f64| {
        let mut v = vec![0.0; 4];
        v[main] = 1.0;
        v[off] = eps;
        EmbeddingVector::new(v).unwrap()
    };
    write_embeddings_ndjson(
        &docs,
        &[
            record("d0", near(0, 2, 0.00), false),
            record("d1", near(0, 2, 0.01), false),
            record("d2", near(0, 2, 0.02), false),
        ],
    )
    .unwrap();
    write_embeddings_ndjson(
        &pots,
        &[
            record("p0", near(1, 3, 0.00), true),
            record("p1", near(1, 3, 0.01), true),
            record("p2", near(1, 3, 0.02), true),
        ],
    )
    .unwrap();
    (docs, pots)
}

fn write_query_lines(path: &Path, queries: &[EmbeddingVector]) {
    let body: String = queries
        .iter()
        .map(|q| serde_json::to_string(&q.components().to_vec()).unwrap() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

#[test]
fn detect_flags_attacker_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, pots) = split_memory(dir.path());
    let memory = dir.path().join("memory.ndjson");
    let out = run(mempot()
        .args(["inject", "--docs"])
        .arg(&docs)
        .arg("--pots")
        .arg(&pots)
        .arg("--out")
        .arg(&memory));
    assert!(out.status.success(), "{}", stderr_of(&out));

    // Pot-side queries: every retrieved item is a pot, so the LLR is
    // ln(3) per round and the upper boundary ln(9) falls at round 2.
    let queries = dir.path().join("attack.ndjson");
    write_query_lines(&queries, &vec![axis(1, 4); 5]);
    let out = run(mempot()
        .args(["detect", "--retrieval-k", "2", "--memory"])
        .arg(&memory)
        .arg("--queries")
        .arg(&queries));
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let events: Vec<serde_json::Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.len(), 2, "stops at the decision round");
    assert_eq!(events[0]["round"], 1);
    assert_eq!(events[0]["decision"], "undecided");
    assert_eq!(events[1]["decision"], "attacker");
    assert!(events[1]["lambda"].as_f64().unwrap() > 2.19);
}

#[test]
fn detect_clears_benign_with_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, pots) = split_memory(dir.path());
    let memory = dir.path().join("memory.ndjson");
    run(mempot()
        .args(["inject", "--docs"])
        .arg(&docs)
        .arg("--pots")
        .arg(&pots)
        .arg("--out")
        .arg(&memory));

    let queries = dir.path().join("benign.ndjson");
    write_query_lines(&queries, &vec![axis(0, 4); 5]);
    let out = run(mempot()
        .args(["detect", "--retrieval-k", "2", "--memory"])
        .arg(&memory)
        .arg("--queries")
        .arg(&queries));
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let last: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(last["decision"], "benign");
}

#[test]
fn inject_emits_binary_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, pots) = split_memory(dir.path());
    let out_bin = dir.path().join("memory.bin");
    let out = run(mempot()
        .args(["inject", "--binary", "--docs"])
        .arg(&docs)
        .arg("--pots")
        .arg(&pots)
        .arg("--out")
        .arg(&out_bin));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let bytes = fs::read(&out_bin).unwrap();
    assert_eq!(&bytes[..8], b"MEMPOTv1");

    // The binary store round-trips through the sniffing loader.
    let records = mempot_core::io::read_embeddings(&out_bin).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(records.iter().filter(|r| r.is_pot).count(), 3);
}

#[test]
fn missing_input_exits_1_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("memory.ndjson");
    let out = run(mempot()
        .args(["inject", "--docs"])
        .arg(dir.path().join("absent.ndjson"))
        .arg("--pots")
        .arg(dir.path().join("also-absent.ndjson"))
        .arg("--out")
        .arg(&out_path));
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_path.exists());
    assert!(stderr_of(&out).contains("error:"));
}

#[test]
fn optimize_trains_pots_and_traces_losses() {
    let dir = tempfile::tempdir().unwrap();
    let docs_path = dir.path().join("docs.ndjson");
    let dim = 8;
    let docs: Vec<EmbeddingRecord> = (0..8)
        .map(|i| {
            let mut v = vec![0.0; dim];
            v[0] = 1.0;
            v[4 + i % 4] = 0.05 * (i as f64 + 1.0);
            record(&format!("d{i}"), EmbeddingVector::new(v).unwrap(), false)
        })
        .collect();
    write_embeddings_ndjson(&docs_path, &docs).unwrap();

    // Bare arrays here, records below: optimize takes both query formats.
    let attacker_path = dir.path().join("attacker.ndjson");
    write_query_lines(&attacker_path, &vec![axis(2, dim); 4]);
    let benign_path = dir.path().join("benign.ndjson");
    write_embeddings_ndjson(
        &benign_path,
        &(0..4)
            .map(|i| record(&format!("b{i}"), axis(0, dim), false))
            .collect::<Vec<_>>(),
    )
    .unwrap();

    let config_path = dir.path().join("train.json");
    fs::write(
        &config_path,
        r#"{"num_pots": 2, "nce_group_size": 2, "retrieval_k": 2,
            "learning_rate": 0.5, "steps": 40, "batch_groups": 4, "seed": 3}"#,
    )
    .unwrap();

    let pots_path = dir.path().join("pots.ndjson");
    let trace_path = dir.path().join("trace.csv");
    let out = run(mempot()
        .args(["optimize", "--docs"])
        .arg(&docs_path)
        .arg("--attacker-seed-queries")
        .arg(&attacker_path)
        .arg("--benign-queries")
        .arg(&benign_path)
        .arg("--config")
        .arg(&config_path)
        .arg("--out-pots")
        .arg(&pots_path)
        .arg("--trace")
        .arg(&trace_path));
    assert!(out.status.success(), "{}", stderr_of(&out));

    let pots = mempot_core::io::read_embeddings(&pots_path).unwrap();
    assert_eq!(pots.len(), 2);
    assert!(pots.iter().all(|p| p.is_pot));

    let trace = fs::read_to_string(&trace_path).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,nce_loss,div_loss,total_loss"));
    assert_eq!(lines.count(), 40);
}

#[test]
fn simulate_writes_labeled_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let memory_path = dir.path().join("docs.ndjson");
    let mut records = Vec::new();
    for c in 0..3usize {
        for j in 0..4usize {
            let mut v = seeded_unit_vector((10 + c) as u64, 8).unwrap().components().to_vec();
            v[7] += 0.01 * j as f64;
            records.push(record(
                &format!("d{c}:{j}"),
                EmbeddingVector::new(v).unwrap(),
                false,
            ));
        }
    }
    write_embeddings_ndjson(&memory_path, &records).unwrap();

    let walk_out = dir.path().join("walk.ndjson");
    let out = run(mempot()
        .args(["simulate", "--mode", "walk", "--sessions", "3", "--rounds", "5", "--memory"])
        .arg(&memory_path)
        .arg("--out")
        .arg(&walk_out));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let walks = mempot_core::io::read_trajectories(&walk_out).unwrap();
    assert_eq!(walks.len(), 3);
    assert!(walks
        .iter()
        .all(|t| t.label == mempot_core::TrajectoryLabel::Attacker && t.queries.len() == 5));

    let benign_out = dir.path().join("benign.ndjson");
    let out = run(mempot()
        .args([
            "simulate", "--mode", "benign", "--sessions", "4", "--rounds", "6", "--clusters", "3",
            "--memory",
        ])
        .arg(&memory_path)
        .arg("--out")
        .arg(&benign_out));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let benign = mempot_core::io::read_trajectories(&benign_out).unwrap();
    assert_eq!(benign.len(), 4);
    assert!(benign
        .iter()
        .all(|t| t.label == mempot_core::TrajectoryLabel::Benign && t.queries.len() == 6));
}

#[test]
fn evaluate_reports_metrics_and_roc() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, pots) = split_memory(dir.path());

    // Two attacker sessions on the pot axis, two benign on the doc axis.
    let trajectories = dir.path().join("sessions.ndjson");
    let mut body = String::new();
    for (label, ax, seed) in [
        ("attacker", 1usize, 1u64),
        ("attacker", 1, 2),
        ("benign", 0, 3),
        ("benign", 0, 4),
    ] {
        let queries: Vec<Vec<f64>> = (0..4).map(|_| axis(ax, 4).components().to_vec()).collect();
        body.push_str(
            &serde_json::json!({"label": label, "seed": seed, "queries": queries}).to_string(),
        );
        body.push('\n');
    }
    fs::write(&trajectories, body).unwrap();

    let report_path = dir.path().join("report.json");
    let roc_path = dir.path().join("roc.csv");
    let out = run(mempot()
        .args(["evaluate", "--retrieval-k", "2", "--memory"])
        .arg(&docs)
        .arg("--pots")
        .arg(&pots)
        .arg("--trajectories")
        .arg(&trajectories)
        .arg("--report")
        .arg(&report_path)
        .arg("--roc-csv")
        .arg(&roc_path));
    assert!(out.status.success(), "{}", stderr_of(&out));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["metrics"]["auroc"], 1.0);
    assert_eq!(report["sessions"], 4);
    assert_eq!(report["config"]["alpha"], 0.1);

    let roc = fs::read_to_string(&roc_path).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n"));
    assert!(roc.lines().count() >= 2);
}

#[test]
fn invert_decodes_pots_with_the_toy_backend() {
    let dir = tempfile::tempdir().unwrap();
    let (docs, pots) = split_memory(dir.path());
    let safety = dir.path().join("safety.txt");
    fs::write(&safety, "1 2 3 4 5 6 7 8").unwrap();

    let out_path = dir.path().join("pot_texts.ndjson");
    let out = run(mempot()
        .args(["invert", "--pots"])
        .arg(&pots)
        .arg("--safety")
        .arg(&safety)
        .arg("--docs")
        .arg(&docs)
        .arg("--out")
        .arg(&out_path));
    assert!(out.status.success(), "{}", stderr_of(&out));

    let rows: Vec<serde_json::Value> = fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r["pot_id"].as_str().unwrap().starts_with('p'));
        assert!(!r["text"].as_str().unwrap().is_empty());
        assert!(r["emb_similarity"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn pipeline_command_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("run.json");
    let config = serde_json::json!({
        "global_seed": 13,
        "dim": 16,
        "pot_ratio": 0.14,
        "scenario": {"num_clusters": 8, "docs_per_cluster": 25, "num_caps": 2},
        "simulate": {"rounds": 32, "sessions": 20},
        "sprt": {"max_rounds": 32},
        "pot_train": {"learning_rate": 0.5, "steps": 120, "batch_groups": 16},
        "paths": {"out_dir": out_dir}
    });
    fs::write(&config_path, config.to_string()).unwrap();

    let out = run(mempot().arg("pipeline").arg("--config").arg(&config_path));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("with pots: auroc"), "{stdout}");
    for artifact in ["report.json", "manifest.json", "pots.ndjson", "trajectories.ndjson"] {
        assert!(out_dir.join(artifact).is_file(), "missing {artifact}");
    }
}

#[test]
fn pipeline_seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("run.json");
    let config = serde_json::json!({
        "global_seed": 13,
        "dim": 8,
        "pot_ratio": 0.1,
        "scenario": {"num_clusters": 4, "docs_per_cluster": 10, "num_caps": 1},
        "simulate": {"rounds": 8, "sessions": 4},
        "sprt": {"max_rounds": 8},
        "pot_train": {"steps": 10, "batch_groups": 4},
        "paths": {"out_dir": out_dir}
    });
    fs::write(&config_path, config.to_string()).unwrap();

    let out = run(mempot()
        .arg("pipeline")
        .arg("--config")
        .arg(&config_path)
        .args(["--seed", "99"]));
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["global_seed"], 99);
}
