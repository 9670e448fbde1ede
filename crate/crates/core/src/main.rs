use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcmgnn::checkpoint::Checkpoint;
use dcmgnn::config::RunConfig;
use dcmgnn::evaluation::{evaluate, sparsity_groups, EvalData, MetricsRecord};
use dcmgnn::graph::{load_interactions, split_train_test, MultiplexBipartiteGraph};
use dcmgnn::model::Model;
use dcmgnn::patterns::{build_all_bbp, enumerate_patterns};
use dcmgnn::synth::{generate, SynthConfig};
use dcmgnn::training::{train, TrainState};

#[derive(Parser)]
#[command(name = "dcmgnn", version, about = "Multi-behavior graph recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset, writing config, metrics and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print aggregate and sparsity-group metrics.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the best-scoring parameters stored in the checkpoint.
        #[arg(long)]
        best: bool,
    },
    /// Print pattern edge counts and the relation chains as CSV.
    InspectPatterns {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic dataset with planted cascade preferences.
    Synth(SynthArgs),
}

/// Every config key as a same-named flag; flags win over the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction file (`user<TAB>item<TAB>relation`) or a saved graph directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    relations: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    canonical_order: Option<String>,
    /// Relation order inside every chain, e.g. `view,cart,buy`.
    #[arg(long)]
    chain_order: Option<String>,
    #[arg(long)]
    split_ratio: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    mu1: Option<String>,
    #[arg(long)]
    mu2: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    mu_scale: Option<String>,
    #[arg(long)]
    leaky_slope: Option<String>,
    #[arg(long)]
    init_std: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    probe_size: Option<String>,
    /// Comma-separated cutoffs, e.g. `5,10,20,40`.
    #[arg(long)]
    ks: Option<String>,
    /// Output directory (default: $DCMGNN_OUTPUT_ROOT/seed-<seed>, else runs/seed-<seed>).
    #[arg(long)]
    output: Option<String>,
    /// Threads for the library's parallel kernels.
    #[arg(long)]
    workers: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    raw_local_adj: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    separate_base: Option<String>,
    /// `row` or `symmetric`.
    #[arg(long)]
    global_norm: Option<String>,
    /// `last-step` or `aggregated`.
    #[arg(long)]
    chain_score: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    per_user_weights: Option<String>,
    /// Also write metrics as flat CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    csv: Option<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields: [(&str, &Option<String>); 31] = [
            ("dataset", &self.dataset),
            ("relations", &self.relations),
            ("target", &self.target),
            ("canonical-order", &self.canonical_order),
            ("chain-order", &self.chain_order),
            ("split-ratio", &self.split_ratio),
            ("dim", &self.dim),
            ("layers", &self.layers),
            ("lr", &self.lr),
            ("batch-size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lambda", &self.lambda),
            ("mu1", &self.mu1),
            ("mu2", &self.mu2),
            ("tau", &self.tau),
            ("mu-scale", &self.mu_scale),
            ("leaky-slope", &self.leaky_slope),
            ("init-std", &self.init_std),
            ("seed", &self.seed),
            ("eval-every", &self.eval_every),
            ("patience", &self.patience),
            ("probe-size", &self.probe_size),
            ("ks", &self.ks),
            ("output", &self.output),
            ("workers", &self.workers),
            ("raw-local-adj", &self.raw_local_adj),
            ("separate-base", &self.separate_base),
            ("global-norm", &self.global_norm),
            ("chain-score", &self.chain_score),
            ("per-user-weights", &self.per_user_weights),
            ("csv", &self.csv),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// `base`, then the config file, then flags.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, Failure> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let pairs = dcmgnn::config::parse_key_values(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            cfg.apply(&pairs).map_err(Failure::config)?;
        }
        cfg.apply(&self.pairs()).map_err(Failure::config)?;
        cfg.validate().map_err(Failure::config)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (default: $DCMGNN_OUTPUT_ROOT/synth, else runs/synth).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = SynthConfig::default().users)]
    users: usize,
    #[arg(long, default_value_t = SynthConfig::default().items)]
    items: usize,
    #[arg(long, default_value_t = SynthConfig::default().communities)]
    communities: usize,
    #[arg(long, default_value_t = SynthConfig::default().views_per_user)]
    views: usize,
    #[arg(long, default_value_t = SynthConfig::default().carts_per_user)]
    carts: usize,
    #[arg(long, default_value_t = SynthConfig::default().buys_per_user)]
    buys: usize,
    /// Probability that a buy comes from the user's carts.
    #[arg(long, default_value_t = SynthConfig::default().cascade)]
    cascade_strength: f64,
    #[arg(long, default_value_t = SynthConfig::default().affinity)]
    affinity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit 1 for usage or configuration problems, 2 for runtime failures.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure { code: 1, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

impl From<dcmgnn::Error> for Failure {
    fn from(e: dcmgnn::Error) -> Self {
        match e {
            dcmgnn::Error::Config(_) | dcmgnn::Error::Checkpoint(_) => Failure::config(e),
            _ => Failure::runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Evaluate { config, checkpoint, best } => cmd_evaluate(&config, &checkpoint, best),
        Command::InspectPatterns { config } => cmd_inspect_patterns(&config),
        Command::Synth(args) => cmd_synth(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn set_workers(workers: usize) {
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
}

fn load_dataset(cfg: &RunConfig) -> Result<MultiplexBipartiteGraph, Failure> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Failure::config("no dataset given (set `dataset` or pass --dataset)"))?;
    if !path.exists() {
        return Err(Failure::config(format!("dataset {} does not exist", path.display())));
    }
    let schema = cfg.schema()?;
    let graph = if path.is_dir() {
        let g = MultiplexBipartiteGraph::load_saved(path)?;
        if g.schema().relations() != schema.relations() || g.schema().target() != schema.target() {
            return Err(Failure::config(format!(
                "saved graph relations {:?} do not match the configured {:?}",
                g.schema().relations(),
                schema.relations()
            )));
        }
        g
    } else {
        load_interactions(path, &schema)?
    };
    log::info!(
        "loaded {} users, {} items, {} edges from {}",
        graph.num_users(),
        graph.num_items(),
        graph.num_edges(),
        path.display()
    );
    Ok(graph)
}

struct Prepared {
    train_graph: MultiplexBipartiteGraph,
    eval: EvalData,
    model: Model,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, Failure> {
    let graph = load_dataset(cfg)?;
    let split = split_train_test(&graph, cfg.split_ratio, cfg.seed)?;
    let train_graph = split.train_graph(&graph)?;
    let eval = EvalData::new(&graph, &split);
    let order = cfg.chain_order_indices(graph.schema()).map_err(Failure::config)?;
    let model = Model::new(&train_graph, cfg.model_config(), order.as_deref()).map_err(Failure::config)?;
    Ok(Prepared { train_graph, eval, model })
}

fn cmd_train(args: &ConfigArgs, resume: Option<&Path>) -> Result<(), Failure> {
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let base = resumed.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let cfg = args.resolve(base)?;
    set_workers(cfg.workers);
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.txt"), cfg.to_key_values())?;
    fs::write(out.join("seed.txt"), format!("{}\n", cfg.seed))?;

    let prep = prepare(&cfg)?;
    for (k, c) in prep.model.chains().iter().enumerate() {
        log::info!(
            "chain {} with {} training pairs",
            c.label(prep.model.schema()),
            prep.model.chain_positives(k).len()
        );
    }
    let mut state = match resumed {
        Some(ck) => {
            ck.check_compatible(&prep.model)?;
            log::info!("resuming after epoch {}", ck.state.epoch);
            ck.state
        }
        None => TrainState::new(&prep.model, cfg.seed),
    };
    let append = state.epoch > 0;
    let open = |name: &str| -> Result<BufWriter<File>, Failure> {
        let path = out.join(name);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    };
    let mut metrics_log = open("metrics.jsonl")?;
    let mut loss_log = open("losses.jsonl")?;
    let mut csv_log = if cfg.csv {
        let mut w = open("metrics.csv")?;
        if !append {
            writeln!(w, "{}", MetricsRecord::CSV_HEADER)?;
        }
        Some(w)
    } else {
        None
    };
    let ckpt_path = out.join("checkpoint.json");
    let tcfg = cfg.train_config();
    let model = &prep.model;
    let mut on_epoch = |record: &dcmgnn::training::EpochRecord, state: &TrainState| -> dcmgnn::Result<()> {
        let io = |e: std::io::Error| dcmgnn::Error::Io { path: out.clone(), source: e };
        let line = serde_json::json!({
            "epoch": record.epoch,
            "mean_loss": record.mean_loss,
            "probe_loss": record.probe_loss,
            "breakdown": record.breakdown,
        });
        writeln!(loss_log, "{line}").map_err(io)?;
        loss_log.flush().map_err(io)?;
        if let Some(m) = &record.metrics {
            writeln!(metrics_log, "{}", m.to_json_line()?).map_err(io)?;
            metrics_log.flush().map_err(io)?;
            if let Some(w) = csv_log.as_mut() {
                for row in m.csv_rows() {
                    writeln!(w, "{row}").map_err(io)?;
                }
                w.flush().map_err(io)?;
            }
            Checkpoint::new(&cfg, model, state).save(&ckpt_path)?;
        }
        Ok(())
    };
    train(model, &prep.train_graph, &prep.eval, &tcfg, &mut state, &mut on_epoch)?;
    Checkpoint::new(&cfg, model, &state).save(&ckpt_path)?;
    match (state.best_epoch, state.best_recall) {
        (Some(e), Some(r)) => println!("best R@{} = {r:.6} at epoch {e}", tcfg.primary_k()),
        _ => println!("trained {} epochs (no evaluation)", state.epoch),
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_evaluate(args: &ConfigArgs, checkpoint: &Path, best: bool) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = args.resolve(ck.config.clone())?;
    set_workers(cfg.workers);
    let prep = prepare(&cfg)?;
    ck.check_compatible(&prep.model)?;
    let params = if best {
        ck.state
            .best_params
            .as_ref()
            .ok_or_else(|| Failure::config("checkpoint holds no best parameters"))?
    } else {
        &ck.state.params
    };
    let result = evaluate(&prep.model, params, &prep.eval, &cfg.ks)?;
    let k = cfg.train_config().primary_k();
    let groups = sparsity_groups(&result, &prep.eval.interaction_counts, k)?;
    println!("epoch {} ({} users evaluated)", ck.state.epoch, result.users.len());
    println!("{:>4}  {:>8}  {:>8}", "k", "recall", "ndcg");
    for ((kk, r), n) in result.ks.iter().zip(&result.recall).zip(&result.ndcg) {
        println!("{kk:>4}  {r:>8.4}  {n:>8.4}");
    }
    println!();
    println!("{:<10}  {:>6}  {:>8}  {:>8}", "group", "users", &format!("R@{k}"), &format!("N@{k}"));
    for g in &groups {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<10}  {:>6}  {:>8}  {:>8}", g.label, g.users, show(g.recall), show(g.ndcg));
    }
    if cfg.csv {
        let record = MetricsRecord::new(ck.state.epoch, &result, groups);
        println!();
        println!("{}", MetricsRecord::CSV_HEADER);
        for row in record.csv_rows() {
            println!("{row}");
        }
    }
    Ok(())
}

fn cmd_inspect_patterns(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = args.resolve(RunConfig::default())?;
    let graph = load_dataset(&cfg)?;
    let schema = graph.schema();
    let n = schema.len();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "mask,bits,pattern,edges")?;
    for bbp in build_all_bbp(&graph) {
        writeln!(out, "{},{},{},{}", bbp.mask.bits(), bbp.mask.bit_string(n), bbp.mask.label(schema), bbp.edges.len())?;
    }
    debug_assert_eq!(enumerate_patterns(schema).len(), (1 << n) - 1);
    writeln!(out)?;
    writeln!(out, "chain,mask,relations")?;
    let order = cfg.chain_order_indices(schema).map_err(Failure::config)?;
    let order = order.as_deref().unwrap_or(schema.canonical_order());
    for (k, c) in dcmgnn::chains::enumerate_chains_with_order(schema, order).iter().enumerate() {
        writeln!(out, "{k},{},{}", c.mask.bits(), c.label(schema))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let config = SynthConfig {
        users: args.users,
        items: args.items,
        communities: args.communities,
        views_per_user: args.views,
        carts_per_user: args.carts,
        buys_per_user: args.buys,
        cascade: args.cascade_strength,
        affinity: args.affinity,
        seed: args.seed,
    };
    config.validate().map_err(Failure::config)?;
    let dir = args.out.clone().unwrap_or_else(|| {
        std::env::var_os(dcmgnn::config::OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join("synth")
    });
    let data = generate(&config)?;
    data.write(&dir)?;
    println!(
        "wrote {} interactions ({} view, {} cart, {} buy) to {}",
        data.interactions.len(),
        data.manifest.edges[0],
        data.manifest.edges[1],
        data.manifest.edges[2],
        dir.display()
    );
    Ok(())
}
