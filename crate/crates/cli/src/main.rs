use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvfuse::checkpoint::{load_checkpoint, save_checkpoint};
use mvfuse::config::{DenominatorScope, Precision, RunConfig};
use mvfuse::data::{load_dataset, make_synthetic, min_max_normalize, save_dataset, MultiViewDataset, SyntheticSpec};
use mvfuse::metrics::MetricReport;
use mvfuse::train::{self, default_sweep_grid, export_embeddings, Evaluation, Model, RunLog};

const RUNLOG_FILE: &str = "runlog.csv";
const METRICS_FILE: &str = "metrics.json";
const EMBEDDINGS_FILE: &str = "embeddings.f32";
const EMBEDDINGS_SHAPE_FILE: &str = "embeddings.shape";
const CHECKPOINT_DIR: &str = "checkpoint";
const GRAPH_FILE: &str = "graph.txt";
const SWEEP_FILE: &str = "sweep.csv";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "Multi-view clustering: training, evaluation and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset
    Gen(GenArgs),
    /// Reconstruction-only training from fresh weights
    Pretrain(TrainArgs),
    /// Contrastive training starting from a checkpoint
    Finetune(FromCheckpointArgs),
    /// Embed, cluster and score a dataset with a checkpoint
    Eval(FromCheckpointArgs),
    /// Grid over lambda and tau from one shared pretrained model
    Sweep(SweepArgs),
    /// Pretrain, fine-tune and evaluate
    Run(TrainArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    /// Per-view feature widths
    #[arg(long, value_delimiter = ',', default_value = "3,3,3")]
    dims: Vec<usize>,
    /// Per-view noise standard deviations
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.4,1.5")]
    noise: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    mean_spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit the labels file
    #[arg(long)]
    no_labels: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Batch,
    Full,
}

/// Overrides applied on top of the defaults or the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON run configuration; flags below take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    d_psi: Option<usize>,
    #[arg(long)]
    d_phi: Option<usize>,
    #[arg(long)]
    depth_u: Option<usize>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dshf: bool,
    #[arg(long)]
    no_akcl: bool,
    /// Rebuild the neighbour graph every R fine-tune epochs (0 = never)
    #[arg(long)]
    graph_refresh_epochs: Option<usize>,
    #[arg(long, value_enum)]
    denominator_scope: Option<ScopeArg>,
    /// Metrics every N epochs during training (0 = only at the end)
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Skip min-max scaling of the input views
    #[arg(long)]
    no_normalize: bool,
}

impl ConfigArgs {
    fn base(&self, fallback: RunConfig) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::from_json_file(p)?),
            None => Ok(fallback),
        }
    }

    fn apply(&self, mut c: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        set!(
            batch_size,
            pretrain_epochs,
            finetune_epochs,
            tau,
            lambda,
            d_psi,
            d_phi,
            depth_u,
            knn_k,
            lr,
            dropout,
            base_channels,
            hidden_dims,
            seed,
            graph_refresh_epochs,
            eval_every
        );
        c.no_dshf |= self.no_dshf;
        c.no_akcl |= self.no_akcl;
        if self.no_normalize {
            c.normalize = false;
        }
        if let Some(s) = self.denominator_scope {
            c.denominator_scope = match s {
                ScopeArg::Batch => DenominatorScope::Batch,
                ScopeArg::Full => DenominatorScope::Full,
            };
        }
        if let Some(p) = self.precision {
            c.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        c
    }

    fn resolve(&self) -> Result<RunConfig> {
        let c = self.apply(self.base(RunConfig::default())?);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FromCheckpointArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by an earlier command
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Lambda grid (default: decades 1e-3..1e3)
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Tau grid (default: 0.2..0.8 step 0.1)
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Run(a) => run(&a),
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.samples, a.clusters, a.dims.clone(), a.noise.clone(), a.seed);
    spec.mean_spread = a.mean_spread;
    let ds = make_synthetic(&spec)?;
    let ds = if a.no_labels {
        MultiViewDataset::new(ds.views().to_vec(), None)?
    } else {
        ds
    };
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} samples, {} views {:?} to {}",
        ds.n_samples(),
        ds.n_views(),
        ds.view_dims(),
        a.out.display()
    );
    Ok(())
}

fn load(path: &Path, config: &RunConfig) -> Result<MultiViewDataset> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(if config.normalize { min_max_normalize(&ds) } else { ds })
}

fn prepare_out(out: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), config.to_json())?;
    Ok(())
}

fn write_log(out: &Path, log: &RunLog) -> Result<()> {
    log.write_csv(&out.join(RUNLOG_FILE))?;
    Ok(())
}

fn report(out: &Path, eval: &Evaluation) -> Result<()> {
    export_embeddings(&eval.embeddings, &out.join(EMBEDDINGS_FILE), &out.join(EMBEDDINGS_SHAPE_FILE))?;
    let json = serde_json::json!({
        "n_samples": eval.embeddings.shape()[0],
        "embedding_dim": eval.embeddings.shape()[1],
        "metrics": eval.metrics,
        "inertia": eval.clusters.as_ref().map(|c| c.inertia),
    });
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&json)?)?;
    match eval.metrics {
        Some(m) => println!("{m}"),
        None => println!("dataset has no labels: metrics skipped, embeddings written to {}", out.display()),
    }
    Ok(())
}

fn pretrain(a: &TrainArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let ds = load(&a.data, &config)?;
    config.validate_for(ds.n_samples())?;
    prepare_out(&a.out, &config)?;
    let mut model = Model::new(&config, &ds.view_dims())?;
    let mut log = RunLog::default();
    train::pretrain(&mut model, &ds, &mut log)?;
    write_log(&a.out, &log)?;
    save_checkpoint(&model, a.out.join(CHECKPOINT_DIR))?;
    println!("checkpoint written to {}", a.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

/// Architecture settings that a checkpoint fixes.
fn check_compatible(stored: &RunConfig, wanted: &RunConfig) -> Result<()> {
    let arch = |c: &RunConfig| {
        (
            c.d_psi,
            c.d_phi,
            c.depth_u,
            c.base_channels,
            c.hidden_dims.clone(),
            c.no_dshf,
            c.can_gate,
            c.can_reduction,
            c.precision,
        )
    };
    if arch(stored) != arch(wanted) {
        bail!("requested architecture differs from the checkpoint; drop the conflicting flags");
    }
    Ok(())
}

fn from_checkpoint(a: &FromCheckpointArgs) -> Result<(Model, MultiViewDataset)> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let config = a.config.apply(a.config.base(model.config.clone())?);
    config.validate()?;
    check_compatible(&model.config, &config)?;
    model.config = config;
    let ds = load(&a.data, &model.config)?;
    Ok((model, ds))
}

fn finetune(a: &FromCheckpointArgs) -> Result<()> {
    let (mut model, ds) = from_checkpoint(a)?;
    prepare_out(&a.out, &model.config)?;
    let mut log = RunLog::default();
    let graph = train::finetune(&mut model, &ds, &mut log)?;
    write_log(&a.out, &log)?;
    if let Some(g) = graph {
        g.write_text(&a.out.join(GRAPH_FILE))?;
    }
    save_checkpoint(&model, a.out.join(CHECKPOINT_DIR))?;
    report(&a.out, &train::evaluate(&model, &ds)?)
}

fn eval(a: &FromCheckpointArgs) -> Result<()> {
    let (model, ds) = from_checkpoint(a)?;
    fs::create_dir_all(&a.out)?;
    report(&a.out, &train::evaluate(&model, &ds)?)
}

fn run(a: &TrainArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let ds = load(&a.data, &config)?;
    config.validate_for(ds.n_samples())?;
    prepare_out(&a.out, &config)?;
    let mut model = Model::new(&config, &ds.view_dims())?;
    let mut log = RunLog::default();
    train::pretrain(&mut model, &ds, &mut log)?;
    let graph = train::finetune(&mut model, &ds, &mut log)?;
    write_log(&a.out, &log)?;
    if let Some(g) = graph {
        g.write_text(&a.out.join(GRAPH_FILE))?;
    }
    save_checkpoint(&model, a.out.join(CHECKPOINT_DIR))?;
    report(&a.out, &train::evaluate(&model, &ds)?)
}

fn fmt_metric(m: &Option<MetricReport>) -> [String; 3] {
    match m {
        Some(m) => [m.acc, m.nmi, m.pur].map(|v| v.to_string()),
        None => Default::default(),
    }
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let config = a.train.config.resolve()?;
    let ds = load(&a.train.data, &config)?;
    prepare_out(&a.train.out, &config)?;
    let (dl, dt) = default_sweep_grid();
    let lambdas = a.lambdas.clone().unwrap_or(dl);
    let taus = a.taus.clone().unwrap_or(dt);
    let rows = train::sweep(&config, &ds, &lambdas, &taus)?;
    let mut csv = String::from("lambda,tau,acc,nmi,pur\n");
    for r in &rows {
        let [acc, nmi, pur] = fmt_metric(&r.metrics);
        csv.push_str(&format!("{},{},{acc},{nmi},{pur}\n", r.lambda, r.tau));
        match r.metrics {
            Some(m) => println!("lambda={} tau={} {m}", r.lambda, r.tau),
            None => println!("lambda={} tau={} (no labels)", r.lambda, r.tau),
        }
    }
    fs::write(a.train.out.join(SWEEP_FILE), csv)?;
    let accs: Vec<f64> = rows.iter().filter_map(|r| r.metrics.map(|m| m.acc)).collect();
    if let (Some(lo), Some(hi)) = (
        accs.iter().copied().reduce(f64::min),
        accs.iter().copied().reduce(f64::max),
    ) {
        println!("acc spread across grid: {:.4}", hi - lo);
    }
    Ok(())
}
