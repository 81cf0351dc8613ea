//! Command-line driver tying scene generation, training, evaluation,
//! localization, ablation comparisons, and gradient checking together.
//!
//! Every subcommand prints its resolved configuration as `key=value` lines
//! before doing any work, runs deterministically for fixed flags and
//! inputs, and exits nonzero on any error. Set `RUST_LOG=info` for
//! per-epoch training output.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use graphloc::data::{
    generate_scene, read_dataset, write_dataset, DatasetFile, SceneConfig, TrajectoryKind,
};
use graphloc::eval::{evaluate, localize, run_ablation, AblationMode, LocalizeOptions};
use graphloc::gnn::{ModelConfig, ModelKind};
use graphloc::retrieval::{EmbeddingDatabase, ImageRecord};
use graphloc::tensor::worst_block;
use graphloc::train::{
    check_training_gradients, fit, load_checkpoint, save_checkpoint, GraphStrategy, TrainConfig,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_ENTRIES_PER_BLOCK: usize = 16;

#[derive(Parser)]
#[command(
    name = "graphloc",
    version,
    about = "Camera re-localization by graph-based relative pose regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: train/test dataset files plus a manifest
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a metrics log
    Train(TrainArgs),
    /// Evaluate a checkpoint over a query set and write the report
    Eval(EvalArgs),
    /// Localize a single query and print its estimated pose
    Localize(LocalizeArgs),
    /// Train and compare the full model against its baselines
    Ablate(AblateArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for train.glds, test.glds, and scene.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train_count: usize,
    #[arg(long, default_value_t = 100)]
    test_count: usize,
    /// Lower box corner as x,y,z meters
    #[arg(long, value_parser = parse_triple, default_value = "-1,-1,-1")]
    volume_min: [f64; 3],
    /// Upper box corner as x,y,z meters
    #[arg(long, value_parser = parse_triple, default_value = "1,1,1")]
    volume_max: [f64; 3],
    /// Trajectory family: random-walk or loops
    #[arg(long, value_parser = parse_trajectory, default_value = "random-walk")]
    trajectory: TrajectoryKind,
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    /// Gaussian noise added to embeddings and features
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Random Fourier frequencies per feature coordinate
    #[arg(long, default_value_t = 16)]
    rff: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `generate` (uses train.glds) or a dataset file
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (default: the checkpoint path with .log appended)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Validation dataset file, enabling early stopping
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Graphs per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    /// Epochs between /10 learning-rate decays
    #[arg(long, default_value_t = 20)]
    lr_decay_every: usize,
    #[arg(long, default_value_t = 5e-4)]
    wd: f64,
    #[arg(long, default_value_t = 0.5)]
    edge_dropout: f64,
    /// Nodes per training graph
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Neighbor subsampling stride
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// Message-passing rounds
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    /// Node and edge feature width (must match the dataset feature dimension)
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Attention down-sampling factor
    #[arg(long, default_value_t = 4)]
    attn_factor: usize,
    /// Train the pairwise regressor instead of the message-passing model
    #[arg(long)]
    pairwise: bool,
    /// Build graphs from random records instead of retrieval neighbors
    #[arg(long)]
    random_graphs: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Early-stopping patience in epochs when a validation set is given
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Database dataset file with posed records
    #[arg(long)]
    db: PathBuf,
    /// Query dataset file with ground-truth poses
    #[arg(long)]
    queries: PathBuf,
    /// Report output path (the report is also printed)
    #[arg(long)]
    out: PathBuf,
    /// Fuse all neighbor estimates by geometric averaging
    #[arg(long)]
    geom_avg: bool,
    /// Override nodes per query graph
    #[arg(long)]
    nodes: Option<usize>,
    /// Override the neighbor subsampling stride
    #[arg(long)]
    stride: Option<usize>,
    /// Run at a different round count than the checkpoint was trained for
    #[arg(long)]
    rounds: Option<usize>,
    /// Permit a round-count override, which degrades accuracy
    #[arg(long)]
    allow_rounds_mismatch: bool,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Database dataset file with posed records
    #[arg(long)]
    db: PathBuf,
    /// Dataset file holding the query record
    #[arg(long)]
    queries: PathBuf,
    /// Query record id (may be omitted when the file has exactly one record)
    #[arg(long)]
    id: Option<String>,
    /// Fuse all neighbor estimates by geometric averaging
    #[arg(long)]
    geom_avg: bool,
    /// Override nodes per query graph
    #[arg(long)]
    nodes: Option<usize>,
    /// Override the neighbor subsampling stride
    #[arg(long)]
    stride: Option<usize>,
    /// Run at a different round count than the checkpoint was trained for
    #[arg(long)]
    rounds: Option<usize>,
    /// Permit a round-count override, which degrades accuracy
    #[arg(long)]
    allow_rounds_mismatch: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory from `generate`: trains on train.glds, evaluates on test.glds
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of full, baseline1, baseline2
    #[arg(long, default_value = "full,baseline1,baseline2")]
    modes: String,
    /// Number of seeds; every mode runs once per seed 0..seeds
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Also write the comparison table to this path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    /// Graphs per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Epochs between /10 learning-rate decays
    #[arg(long, default_value_t = 200)]
    lr_decay_every: usize,
    #[arg(long, default_value_t = 5e-4)]
    wd: f64,
    #[arg(long, default_value_t = 0.5)]
    edge_dropout: f64,
    /// Nodes per training graph
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    /// Neighbor subsampling stride
    #[arg(long, default_value_t = 5)]
    stride: usize,
    /// Message-passing rounds
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    /// Node and edge feature width
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Attention down-sampling factor
    #[arg(long, default_value_t = 4)]
    attn_factor: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    attn_factor: usize,
    /// Nodes in the toy graph
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, found {s:?}"));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad number {part:?}"))?;
    }
    Ok(out)
}

fn parse_trajectory(s: &str) -> std::result::Result<TrajectoryKind, String> {
    match s {
        "random-walk" => Ok(TrajectoryKind::RandomWalk),
        "loops" => Ok(TrajectoryKind::Loops),
        other => Err(format!(
            "unknown trajectory {other:?}, expected random-walk or loops"
        )),
    }
}

fn trajectory_name(kind: TrajectoryKind) -> &'static str {
    match kind {
        TrajectoryKind::RandomWalk => "random-walk",
        TrajectoryKind::Loops => "loops",
    }
}

fn kv(key: &str, value: impl Display) {
    println!("{key}={value}");
}

fn triple(v: &[f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn or_checkpoint<T: Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "checkpoint".into(),
    }
}

fn or_none<T: Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "none".into(),
    }
}

/// A dataset flag accepts either a file or a directory from `generate`; a
/// directory resolves to the named file inside it.
fn dataset_path(arg: &Path, name: &str) -> PathBuf {
    if arg.is_dir() {
        arg.join(name)
    } else {
        arg.to_path_buf()
    }
}

fn load_records(path: &Path) -> Result<DatasetFile> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn sibling_log_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".log");
    PathBuf::from(os)
}

fn resolve_rounds(requested: Option<usize>, trained: usize, allow: bool) -> Result<Option<usize>> {
    match requested {
        None => Ok(None),
        Some(r) if r == trained => Ok(None),
        Some(r) => {
            if !allow {
                bail!(
                    "checkpoint was trained with {trained} message-passing rounds; \
                     running it at {r} degrades accuracy, pass --allow-rounds-mismatch to force"
                );
            }
            Ok(Some(r))
        }
    }
}

fn scene_manifest(config: &SceneConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("train_count={}\n", config.train_count));
    out.push_str(&format!("test_count={}\n", config.test_count));
    out.push_str(&format!("volume_min={}\n", triple(&config.volume_min)));
    out.push_str(&format!("volume_max={}\n", triple(&config.volume_max)));
    out.push_str(&format!(
        "trajectory={}\n",
        trajectory_name(config.trajectory)
    ));
    out.push_str(&format!("embedding_dim={}\n", config.embedding_dim));
    out.push_str(&format!("feature_dim={}\n", config.feature_dim));
    out.push_str(&format!("noise_sigma={}\n", config.noise_sigma));
    out.push_str(&format!("rff_count={}\n", config.rff_count));
    out.push_str(&format!("rot_amplitude={}\n", config.rot_amplitude));
    out.push_str(&format!("rot_jitter={}\n", config.rot_jitter));
    out.push_str(&format!("seed={}\n", config.seed));
    out
}

fn print_train_config(config: &TrainConfig) {
    kv("epochs", config.epochs);
    kv("batch_size", config.batch_size);
    kv("lr0", config.lr0);
    kv("lr_decay_every", config.lr_decay_every);
    kv("weight_decay", config.weight_decay);
    kv("edge_dropout", config.edge_dropout);
    kv("n_nodes", config.n_nodes);
    kv("stride", config.stride);
    kv("rounds", config.model.rounds);
    kv("width", config.model.width);
    kv("attn_factor", config.model.attn_factor);
    kv(
        "kind",
        match config.kind {
            ModelKind::MessagePassing => "message-passing",
            ModelKind::PairwiseMlp => "pairwise-mlp",
        },
    );
    kv(
        "strategy",
        match config.strategy {
            GraphStrategy::Retrieval => "retrieval",
            GraphStrategy::Random => "random",
        },
    );
    kv("seed", config.seed);
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let config = SceneConfig {
        train_count: args.train_count,
        test_count: args.test_count,
        volume_min: args.volume_min,
        volume_max: args.volume_max,
        trajectory: args.trajectory,
        embedding_dim: args.embedding_dim,
        feature_dim: args.feature_dim,
        noise_sigma: args.noise,
        rff_count: args.rff,
        seed: args.seed,
        ..SceneConfig::default()
    };
    kv("command", "generate");
    kv("out", args.out.display());
    let manifest = scene_manifest(&config);
    print!("{manifest}");

    let (train, test) = generate_scene(&config)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset(&train, &args.out.join("train.glds"))?;
    write_dataset(&test, &args.out.join("test.glds"))?;
    fs::write(args.out.join("scene.txt"), &manifest)?;
    println!(
        "wrote {} train and {} test records to {}",
        train.records.len(),
        test.records.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr0: args.lr,
        lr_decay_every: args.lr_decay_every,
        weight_decay: args.wd,
        edge_dropout: args.edge_dropout,
        n_nodes: args.nodes,
        stride: args.stride,
        model: ModelConfig {
            width: args.width,
            attn_factor: args.attn_factor,
            rounds: args.rounds,
        },
        kind: if args.pairwise {
            ModelKind::PairwiseMlp
        } else {
            ModelKind::MessagePassing
        },
        strategy: if args.random_graphs {
            GraphStrategy::Random
        } else {
            GraphStrategy::Retrieval
        },
        seed: args.seed,
        early_stop_patience: args.patience,
    };
    let train_path = dataset_path(&args.data, "train.glds");
    let log_path = args.log.clone().unwrap_or_else(|| sibling_log_path(&args.out));

    kv("command", "train");
    kv("data", train_path.display());
    kv("out", args.out.display());
    kv("log", log_path.display());
    kv(
        "val",
        or_none(&args.val.as_ref().map(|p| p.display().to_string())),
    );
    print_train_config(&config);
    kv("early_stop_patience", args.patience);

    let train_set = load_records(&train_path)?;
    let db = EmbeddingDatabase::from_records(train_set.records)?;
    let validation = match &args.val {
        Some(path) => Some(load_records(path)?.records),
        None => None,
    };

    let outcome = fit(&db, &config, validation.as_deref())?;
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    let mut log_text = String::new();
    for record in &outcome.history {
        log_text.push_str(&format!("{record}\n"));
    }
    fs::write(&log_path, log_text)?;
    println!(
        "checkpoint={} epochs_completed={}",
        args.out.display(),
        outcome.checkpoint.epoch
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    kv("command", "eval");
    kv("ckpt", args.ckpt.display());
    kv("db", args.db.display());
    kv("queries", args.queries.display());
    kv("out", args.out.display());
    kv("geom_avg", args.geom_avg);
    kv("nodes", or_checkpoint(&args.nodes));
    kv("stride", or_checkpoint(&args.stride));
    kv("rounds", or_checkpoint(&args.rounds));
    kv("allow_rounds_mismatch", args.allow_rounds_mismatch);

    let ckpt = load_checkpoint(&args.ckpt)?;
    let force_rounds = resolve_rounds(
        args.rounds,
        ckpt.model_config.rounds,
        args.allow_rounds_mismatch,
    )?;
    let db = EmbeddingDatabase::from_records(load_records(&args.db)?.records)?;
    let queries = load_records(&args.queries)?.records;
    let opts = LocalizeOptions {
        use_geometric_averaging: args.geom_avg,
        n_nodes: args.nodes,
        stride: args.stride,
        force_rounds,
    };
    let report = evaluate(&db, &ckpt, &queries, &opts)?;
    let text = report.to_text();
    fs::write(&args.out, &text)?;
    print!("{text}");
    Ok(())
}

fn find_query(records: Vec<ImageRecord>, id: &Option<String>, path: &Path) -> Result<ImageRecord> {
    match id {
        Some(id) => records
            .into_iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| anyhow::anyhow!("no record {id:?} in {}", path.display())),
        None => {
            if records.len() == 1 {
                Ok(records.into_iter().next().expect("length checked"))
            } else {
                bail!(
                    "{} holds {} records, pass --id to pick one",
                    path.display(),
                    records.len()
                )
            }
        }
    }
}

fn run_localize(args: &LocalizeArgs) -> Result<()> {
    kv("command", "localize");
    kv("ckpt", args.ckpt.display());
    kv("db", args.db.display());
    kv("queries", args.queries.display());
    kv("id", or_none(&args.id));
    kv("geom_avg", args.geom_avg);
    kv("nodes", or_checkpoint(&args.nodes));
    kv("stride", or_checkpoint(&args.stride));
    kv("rounds", or_checkpoint(&args.rounds));
    kv("allow_rounds_mismatch", args.allow_rounds_mismatch);

    let ckpt = load_checkpoint(&args.ckpt)?;
    let force_rounds = resolve_rounds(
        args.rounds,
        ckpt.model_config.rounds,
        args.allow_rounds_mismatch,
    )?;
    let db = EmbeddingDatabase::from_records(load_records(&args.db)?.records)?;
    let query = find_query(load_records(&args.queries)?.records, &args.id, &args.queries)?;
    let opts = LocalizeOptions {
        use_geometric_averaging: args.geom_avg,
        n_nodes: args.nodes,
        stride: args.stride,
        force_rounds,
    };
    let result = localize(&db, &ckpt, &query, &opts)?;
    kv("query", &query.id);
    let p = &result.estimate;
    println!("t={} {} {}", p.t[0], p.t[1], p.t[2]);
    println!("q={} {} {} {}", p.q.w, p.q.x, p.q.y, p.q.z);
    for (i, n) in result.neighbor_estimates.iter().enumerate() {
        println!(
            "neighbor {} {} {} {} {} {} {} {}",
            i, n.t[0], n.t[1], n.t[2], n.q.w, n.q.x, n.q.y, n.q.z
        );
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let modes = args
        .modes
        .split(',')
        .map(|m| AblationMode::parse(m.trim()))
        .collect::<graphloc::Result<Vec<_>>>()?;
    let base = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr0: args.lr,
        lr_decay_every: args.lr_decay_every,
        weight_decay: args.wd,
        edge_dropout: args.edge_dropout,
        n_nodes: args.nodes,
        stride: args.stride,
        model: ModelConfig {
            width: args.width,
            attn_factor: args.attn_factor,
            rounds: args.rounds,
        },
        ..TrainConfig::default()
    };
    let train_path = dataset_path(&args.data, "train.glds");
    let test_path = dataset_path(&args.data, "test.glds");

    kv("command", "ablate");
    kv("data", args.data.display());
    kv(
        "modes",
        modes
            .iter()
            .map(|m| m.label())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("seeds", args.seeds);
    kv(
        "out",
        or_none(&args.out.as_ref().map(|p| p.display().to_string())),
    );
    print_train_config(&base);

    let db = EmbeddingDatabase::from_records(load_records(&train_path)?.records)?;
    let queries = load_records(&test_path)?.records;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let report = run_ablation(&db, &queries, &base, &modes, &seeds, None)?;
    let text = report.to_text();
    if let Some(out) = &args.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    kv("command", "gradcheck");
    kv("width", args.width);
    kv("attn_factor", args.attn_factor);
    kv("nodes", args.nodes);
    kv("rounds", args.rounds);
    kv("seed", args.seed);
    kv("entries_per_block", GRADCHECK_ENTRIES_PER_BLOCK);
    kv("tolerance", GRADCHECK_TOLERANCE);

    let config = ModelConfig {
        width: args.width,
        attn_factor: args.attn_factor,
        rounds: args.rounds,
    };
    let report = check_training_gradients(
        config,
        ModelKind::MessagePassing,
        args.nodes,
        args.seed,
        GRADCHECK_ENTRIES_PER_BLOCK,
    )?;
    for block in &report {
        println!(
            "block={} rel_err={:e} entries={}",
            block.name, block.max_rel_err, block.entries_checked
        );
    }
    let worst = worst_block(&report);
    println!("max_rel_err={:e}", worst.max_rel_err);
    if worst.max_rel_err >= GRADCHECK_TOLERANCE {
        bail!(
            "gradient check failed: block {} rel err {:e}",
            worst.name,
            worst.max_rel_err
        );
    }
    println!("gradient check passed");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Localize(args) => run_localize(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}
