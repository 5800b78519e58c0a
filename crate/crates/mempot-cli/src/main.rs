//! Command-line front end: inject pots into a store, train them,
//! decode their text, simulate sessions, stream detection, evaluate,
//! and run the whole pipeline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mempot_core::config::{apply_thread_cap, validate_config, RunConfig};
use mempot_core::embedding::{seeded_unit_vector, EmbeddingVector};
use mempot_core::error::{MempotError, Result};
use mempot_core::eval::{compute_metrics, roc_points, run_sessions};
use mempot_core::inversion::{
    beam_search_invert, BeamBackend, DecodingConfig, ScorerWeights, ToyBackends,
};
use mempot_core::io::{
    atomic_write, read_embeddings, read_token_file, read_trajectories, write_embeddings_binary,
    write_embeddings_ndjson, write_trajectories, EmbeddingRecord, BINARY_MAGIC,
};
use mempot_core::memory::{balanced_kmeans, AugmentedMemory};
use mempot_core::optimizer::{optimize, PotParams, PotTrainConfig, QuerySampler};
use mempot_core::pipeline::{run_pipeline, PotText};
use mempot_core::rng::substream_seed;
use mempot_core::simulate::{
    benign_sampler, fit_attacker_proxy, proxy_rollout, random_walk_attacker, Trajectory,
    TrajectoryLabel,
};
use mempot_core::sprt::{estimate_llr, Decision, SprtConfig, SprtSession};

#[derive(Parser)]
#[command(
    name = "mempot",
    version,
    about = "Honeypot-augmented sequential detection for agent memory stores"
)]
struct Cli {
    /// Global seed; command-level randomness derives from it through
    /// named substreams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file. Schema depends on the subcommand: run config
    /// for `pipeline`, pot-training config for `optimize`, detector
    /// config for `detect` and `evaluate`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for `pipeline`; overrides the config's
    /// paths.out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Append honeypot records to a document collection.
    Inject(InjectArgs),
    /// Train honeypot embeddings against seed attacker and benign queries.
    Optimize(OptimizeArgs),
    /// Decode honeypot vectors to text via scorer-guided beam search.
    Invert(InvertArgs),
    /// Generate attacker or benign query trajectories.
    Simulate(SimulateArgs),
    /// Stream query embeddings through retrieval and the sequential
    /// test, one NDJSON event per round. Exits 2 on an Attacker call.
    Detect(DetectArgs),
    /// Score labeled trajectories against an augmented memory.
    Evaluate(EvaluateArgs),
    /// Full run: cluster, optimize pots, optional invert, simulate,
    /// evaluate, writing stamped artifacts.
    Pipeline,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    pots: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Emit the binary embedding format instead of NDJSON.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    docs: PathBuf,
    /// Query pool, same formats as `detect --queries`.
    #[arg(long)]
    attacker_seed_queries: PathBuf,
    /// Query pool, same formats as `detect --queries`.
    #[arg(long)]
    benign_queries: PathBuf,
    #[arg(long)]
    out_pots: PathBuf,
    /// Optional CSV loss trace (step, nce_loss, div_loss, total_loss).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    pots: PathBuf,
    /// Whitespace-separated token ids; doubles as the toy vocabulary.
    #[arg(long)]
    safety: PathBuf,
    #[arg(long)]
    docs: PathBuf,
    /// Scorer weights JSON; defaults used when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Decoding config JSON; defaults used when omitted.
    #[arg(long)]
    decoding: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendKind::Toy)]
    backend: BackendKind,
    /// Base URL for the http backend.
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Toy,
    Http,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    memory: PathBuf,
    #[arg(long, value_enum)]
    mode: SimulateMode,
    #[arg(long)]
    sessions: usize,
    #[arg(long)]
    rounds: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    retrieval_k: usize,
    /// Cluster count for benign intent sampling.
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Benign query spread around the intent centroid.
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    /// Walk neighborhood size.
    #[arg(long, default_value_t = 4)]
    walk_k: usize,
    /// Walk step jitter.
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
    /// Labeled trajectories to fit the proxy attacker on.
    #[arg(long)]
    fit_from: Option<PathBuf>,
    /// Proxy feature window.
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Proxy ridge regularizer.
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimulateMode {
    Walk,
    Benign,
    Proxy,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    memory: PathBuf,
    /// Queries: NDJSON with a bare number array or an embedding record
    /// per line, or the binary embedding format.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 4)]
    retrieval_k: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    memory: PathBuf,
    #[arg(long)]
    pots: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Optional ROC dump (threshold, fpr, tpr).
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    retrieval_k: usize,
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| MempotError::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn load_memory(path: &Path, retrieval_k: usize) -> Result<AugmentedMemory> {
    AugmentedMemory::new(read_embeddings(path)?, retrieval_k)
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

fn write_ndjson<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        for row in rows {
            serde_json::to_writer(&mut *w, row)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

struct PoolSampler {
    pool: Vec<EmbeddingVector>,
}

impl PoolSampler {
    fn from_file(path: &Path) -> Result<Self> {
        let pool = read_query_vectors(path)?;
        if pool.is_empty() {
            return Err(MempotError::invalid_argument(format!(
                "no query embeddings in {}",
                path.display()
            )));
        }
        Ok(PoolSampler { pool })
    }
}

impl QuerySampler for PoolSampler {
    fn sample(&mut self, rng: &mut rand_chacha::ChaCha12Rng) -> Result<EmbeddingVector> {
        use rand::Rng;
        Ok(self.pool[rng.random_range(0..self.pool.len())].clone())
    }
}

fn cmd_inject(args: &InjectArgs) -> Result<()> {
    let docs = read_embeddings(&args.docs)?;
    let pots: Vec<EmbeddingVector> = read_embeddings(&args.pots)?
        .into_iter()
        .map(|r| r.vector)
        .collect();
    let memory = AugmentedMemory::new(docs, 1)?;
    let augmented = memory.inject_pots(&pots)?;
    let records = augmented.records();
    if args.binary {
        write_embeddings_binary(&args.out, &records)?;
    } else {
        write_embeddings_ndjson(&args.out, &records)?;
    }
    eprintln!(
        "wrote {} records ({} pots, ratio {:.4}) to {}",
        records.len(),
        augmented.pots().len(),
        augmented.pot_ratio(),
        args.out.display()
    );
    Ok(())
}

fn cmd_optimize(args: &OptimizeArgs, config_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut config: PotTrainConfig = match config_path {
        Some(p) => read_json_file(p)?,
        None => PotTrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;

    let memory = AugmentedMemory::new(read_embeddings(&args.docs)?, config.retrieval_k)?;
    let mut attacker = PoolSampler::from_file(&args.attacker_seed_queries)?;
    let mut benign = PoolSampler::from_file(&args.benign_queries)?;

    // One pot per balanced-kmeans centroid of the document corpus.
    let clusters = balanced_kmeans(
        &memory.doc_vectors(),
        config.num_pots,
        substream_seed(config.seed, "cli-pot-init", 0),
        25,
    )?;
    let init = PotParams::init_from_centroids(&clusters.centroids, config.num_pots, 0.0, 0)?;

    let outcome = optimize(&memory, init, &mut attacker, &mut benign, &config)?;
    let units = outcome.params.unit_pots()?;
    let records: Vec<EmbeddingRecord> = units
        .into_iter()
        .enumerate()
        .map(|(i, vector)| EmbeddingRecord {
            id: format!("pot:{i}"),
            vector,
            is_pot: true,
        })
        .collect();
    write_embeddings_ndjson(&args.out_pots, &records)?;

    if let Some(trace_path) = &args.trace {
        let rows: Vec<Vec<f64>> = outcome
            .trace
            .iter()
            .map(|r| vec![r.step as f64, r.nce_loss, r.div_loss, r.total_loss])
            .collect();
        write_csv(trace_path, "step,nce_loss,div_loss,total_loss", &rows)?;
    }

    let (first, last) = (outcome.trace.first(), outcome.trace.last());
    eprintln!(
        "trained {} pots over {} steps, nce {:.4} -> {:.4}",
        config.num_pots,
        config.steps,
        first.map(|r| r.nce_loss).unwrap_or(f64::NAN),
        last.map(|r| r.nce_loss).unwrap_or(f64::NAN),
    );
    Ok(())
}

fn cmd_invert(args: &InvertArgs, seed: Option<u64>) -> Result<()> {
    let pots = read_embeddings(&args.pots)?;
    if pots.is_empty() {
        return Err(MempotError::invalid_argument("no pot records to invert"));
    }
    let docs: Vec<EmbeddingVector> = read_embeddings(&args.docs)?
        .into_iter()
        .map(|r| r.vector)
        .collect();
    let safety = read_token_file(&args.safety)?;
    let weights: ScorerWeights = match &args.weights {
        Some(p) => read_json_file(p)?,
        None => ScorerWeights::default(),
    };
    let decoding: DecodingConfig = match &args.decoding {
        Some(p) => read_json_file(p)?,
        None => DecodingConfig::default(),
    };

    let backend: Box<dyn BeamBackend> = match args.backend {
        BackendKind::Toy => {
            let mut vocab = safety.clone();
            vocab.sort_unstable();
            vocab.dedup();
            let dim = pots[0].vector.dim();
            Box::new(ToyBackends::new(
                vocab,
                dim,
                substream_seed(seed.unwrap_or(0), "invert-backend", 0),
            )?)
        }
        BackendKind::Http => http_backend(args.backend_url.as_deref())?,
    };

    let rows: Vec<PotText> = pots
        .iter()
        .map(|p| {
            let res =
                beam_search_invert(&p.vector, &safety, &docs, &weights, &decoding, &*backend)?;
            Ok(PotText {
                pot_id: p.id.clone(),
                text: res
                    .tokens
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                score: res.score,
                emb_similarity: res.emb_similarity,
            })
        })
        .collect::<Result<_>>()?;
    write_ndjson(&args.out, &rows)?;
    eprintln!("decoded {} pots to {}", rows.len(), args.out.display());
    Ok(())
}

#[cfg(feature = "http")]
fn http_backend(url: Option<&str>) -> Result<Box<dyn BeamBackend>> {
    let url = url.ok_or_else(|| {
        MempotError::invalid_argument("--backend-url is required for the http backend")
    })?;
    Ok(Box::new(mempot_core::inversion::HttpBackend::new(url)))
}

#[cfg(not(feature = "http"))]
fn http_backend(_url: Option<&str>) -> Result<Box<dyn BeamBackend>> {
    Err(MempotError::invalid_argument(
        "this build has no http backend; rebuild with --features http",
    ))
}

fn cmd_simulate(args: &SimulateArgs, seed: Option<u64>) -> Result<()> {
    if args.sessions == 0 {
        return Err(MempotError::invalid_argument("sessions must be >= 1"));
    }
    let seed = seed.unwrap_or(0);
    let memory = load_memory(&args.memory, args.retrieval_k)?;
    let mut out: Vec<Trajectory> = Vec::with_capacity(args.sessions);
    match args.mode {
        SimulateMode::Walk => {
            for s in 0..args.sessions as u64 {
                let q0 = seeded_unit_vector(
                    substream_seed(seed, "cli-walk-start", s),
                    memory.dim(),
                )?;
                out.push(random_walk_attacker(
                    &memory,
                    &q0,
                    args.walk_k,
                    args.rounds,
                    args.jitter,
                    substream_seed(seed, "cli-walk", s),
                )?);
            }
        }
        SimulateMode::Benign => {
            let clusters = balanced_kmeans(
                &memory.doc_vectors(),
                args.clusters,
                substream_seed(seed, "cli-kmeans", 0),
                25,
            )?;
            for s in 0..args.sessions as u64 {
                out.push(benign_sampler(
                    &clusters,
                    (s % args.clusters as u64) as usize,
                    args.rounds,
                    args.spread,
                    substream_seed(seed, "cli-benign", s),
                )?);
            }
        }
        SimulateMode::Proxy => {
            let fit_from = args.fit_from.as_ref().ok_or_else(|| {
                MempotError::invalid_argument("--fit-from is required for proxy mode")
            })?;
            let labeled = read_trajectories(fit_from)?;
            let proxy = fit_attacker_proxy(&labeled, &memory, args.window, args.ridge)?;
            for s in 0..args.sessions as u64 {
                let q0 = seeded_unit_vector(
                    substream_seed(seed, "cli-proxy-start", s),
                    memory.dim(),
                )?;
                out.push(proxy_rollout(&proxy, &memory, &q0, args.rounds)?);
            }
        }
    }
    write_trajectories(&args.out, &out)?;
    eprintln!(
        "wrote {} sessions x {} rounds to {}",
        out.len(),
        args.rounds,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectEvent {
    round: u32,
    llr: f64,
    lambda: f64,
    decision: Decision,
}

// Query files use the same formats everywhere: NDJSON with a bare
// number array or an embedding record per line, or the binary
// embedding format.
fn read_query_vectors(path: &Path) -> Result<Vec<EmbeddingVector>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        return Ok(read_embeddings(path)?
            .into_iter()
            .map(|r| r.vector)
            .collect());
    }
    let text = String::from_utf8(bytes).map_err(|e| MempotError::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut pool = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        pool.push(parse_query_line(line, i + 1, path)?);
    }
    Ok(pool)
}

fn parse_query_line(line: &str, lineno: usize, path: &Path) -> Result<EmbeddingVector> {
    let bad = |reason: String| MempotError::MalformedFile {
        path: path.display().to_string(),
        reason: format!("line {lineno}: {reason}"),
    };
    if let Ok(components) = serde_json::from_str::<Vec<f64>>(line) {
        return EmbeddingVector::new(components).map_err(|e| bad(e.to_string()));
    }
    serde_json::from_str::<EmbeddingRecord>(line)
        .map(|r| r.vector)
        .map_err(|e| bad(format!("expected a number array or embedding record: {e}")))
}

fn cmd_detect(args: &DetectArgs, config_path: Option<&Path>) -> Result<Decision> {
    let config: SprtConfig = match config_path {
        Some(p) => read_json_file(p)?,
        None => SprtConfig::default(),
    };
    config.validate()?;
    let memory = load_memory(&args.memory, args.retrieval_k)?;

    let queries = read_query_vectors(&args.queries)?;
    let stdout = std::io::stdout();
    let mut session = SprtSession::new();
    let mut round = 0u32;
    for query in &queries {
        let obs = memory.retrieve(query, round)?;
        let llr = estimate_llr(&obs, &config)?;
        session.step(llr, &config)?;
        round += 1;
        let event = DetectEvent {
            round,
            llr,
            lambda: session.lambda(),
            decision: session.decision(),
        };
        let mut lock = stdout.lock();
        serde_json::to_writer(&mut lock, &event)?;
        writeln!(lock)?;
        if !session.is_open() {
            break;
        }
    }
    if round == 0 {
        return Err(MempotError::invalid_argument("no queries in input"));
    }
    Ok(session.decision())
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    config: &'a SprtConfig,
    retrieval_k: usize,
    sessions: usize,
    trajectory_seeds: Vec<u64>,
    metrics: mempot_core::eval::MetricsReport,
}

fn cmd_evaluate(args: &EvaluateArgs, config_path: Option<&Path>) -> Result<()> {
    let config: SprtConfig = match config_path {
        Some(p) => read_json_file(p)?,
        None => SprtConfig::default(),
    };
    config.validate()?;

    let docs = read_embeddings(&args.memory)?;
    let pots: Vec<EmbeddingVector> = read_embeddings(&args.pots)?
        .into_iter()
        .map(|r| r.vector)
        .collect();
    let memory = AugmentedMemory::new(docs, args.retrieval_k)?.inject_pots(&pots)?;
    let trajectories = read_trajectories(&args.trajectories)?;

    let outcomes = run_sessions(&memory, &trajectories, &config)?;
    let metrics = compute_metrics(&outcomes, config.max_rounds)?;

    if let Some(roc_path) = &args.roc_csv {
        let mut attackers = Vec::new();
        let mut benign = Vec::new();
        for o in &outcomes {
            match o.label {
                TrajectoryLabel::Attacker => attackers.push(o.score),
                TrajectoryLabel::Benign => benign.push(o.score),
            }
        }
        let rows: Vec<Vec<f64>> = roc_points(&attackers, &benign)?
            .into_iter()
            .map(|(t, f, p)| vec![t, f, p])
            .collect();
        write_csv(roc_path, "threshold,fpr,tpr", &rows)?;
    }

    let report = EvaluateReport {
        config: &config,
        retrieval_k: args.retrieval_k,
        sessions: trajectories.len(),
        trajectory_seeds: trajectories.iter().map(|t| t.seed).collect(),
        metrics,
    };
    atomic_write(&args.report, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    eprintln!(
        "auroc {:.4}, detection rate {:.4}, report at {}",
        report.metrics.auroc,
        report.metrics.attacker_detection_rate,
        args.report.display()
    );
    Ok(())
}

fn cmd_pipeline(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let mut config: RunConfig = match (config_path, out_dir) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)?;
            validate_config(&text)?
        }
        (None, Some(dir)) => RunConfig::synthetic(dir),
        (None, None) => {
            return Err(MempotError::invalid_argument(
                "pipeline needs --config or --out-dir",
            ))
        }
    };
    if let Some(s) = seed {
        config.global_seed = s;
    }
    if let Some(dir) = out_dir {
        config.paths.out_dir = dir.to_path_buf();
    }
    config.validate()?;

    let report = run_pipeline(&config)?;
    println!(
        "config {} seed {} docs {} pots {}",
        report.config_hash, report.global_seed, report.corpus.docs, report.corpus.pot_count
    );
    println!(
        "with pots: auroc {:.4} detection {:.4} mean rounds {:.2}",
        report.comparison.with_pots.auroc,
        report.comparison.with_pots.attacker_detection_rate,
        report.comparison.with_pots.mean_attacker_decision_rounds
    );
    println!(
        "without pots: auroc {:.4}; static len {}: auroc {:.4}",
        report.comparison.without_pots.auroc,
        report.comparison.static_fixed.test_length,
        report.comparison.static_fixed.auroc
    );
    println!("artifacts in {}", config.paths.out_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    apply_thread_cap()?;
    let config_path = cli.config.as_deref();
    match &cli.command {
        Command::Inject(args) => cmd_inject(args).map(|()| ExitCode::SUCCESS),
        Command::Optimize(args) => {
            cmd_optimize(args, config_path, cli.seed).map(|()| ExitCode::SUCCESS)
        }
        Command::Invert(args) => cmd_invert(args, cli.seed).map(|()| ExitCode::SUCCESS),
        Command::Simulate(args) => cmd_simulate(args, cli.seed).map(|()| ExitCode::SUCCESS),
        Command::Detect(args) => cmd_detect(args, config_path).map(|decision| {
            if decision == Decision::Attacker {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }),
        Command::Evaluate(args) => cmd_evaluate(args, config_path).map(|()| ExitCode::SUCCESS),
        Command::Pipeline => {
            cmd_pipeline(config_path, cli.seed, cli.out_dir.as_deref()).map(|()| ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
