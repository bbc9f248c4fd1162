use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cagem::checkpoint::{self, Checkpoint};
use cagem::classify::{error_rate, p_classifier, q_classifier, DEFAULT_SAMPLES};
use cagem::data::{binarize, default_data_dir, Dataset, DatasetName, Split};
use cagem::evaluation::{elbo_decompose, latent_export, model_iw_bound};
use cagem::model::{ModelConfig, Variant};
use cagem::objective::DEFAULT_BETA;
use cagem::pgm;
use cagem::train::{stream_rng, Schedule, TrainConfig, Trainer};
use cagem::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

/// Cluster-aware generative models: training, likelihood bounds,
/// classification, sampling and latent diagnostics.
#[derive(Parser)]
#[command(name = "cagem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Continue a run from one of its checkpoints.
    Resume(ResumeArgs),
    /// Importance-weighted log-likelihood bound on a split.
    Evaluate(EvaluateArgs),
    /// Classification error of both classifiers on a split.
    Classify(ClassifyArgs),
    /// Draw images from the generative model.
    Sample(SampleArgs),
    /// ELBO decomposition, latent activity and latent export.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Mnist10k,
    Omniglot,
}

impl From<DatasetArg> for DatasetName {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::Mnist10k => DatasetName::Mnist10k,
            DatasetArg::Omniglot => DatasetName::Omniglot,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum VariantArg {
    Vae,
    Cagem,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the dataset files [default: $CAGEM_DATA_DIR/<dataset> or data/<dataset>]
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "cagem")]
    variant: VariantArg,
    /// Labelled examples, spread evenly over the classes; 0 for none.
    #[arg(long, default_value_t = 0)]
    labels: usize,
    /// Cluster count K [default: number of dataset classes]
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Hidden widths shared by every network, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1024,512")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    z1: usize,
    #[arg(long, default_value_t = 32)]
    z2: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    labelled_batch: usize,
    /// Epochs of linear KL-temperature warm-up.
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Validate on at most this many rows.
    #[arg(long)]
    valid_rows: Option<usize>,
    /// Train on the first N rows of the train split only.
    #[arg(long)]
    train_rows: Option<usize>,
    /// Importance samples for the final test bound (0 skips it).
    #[arg(long, default_value_t = 5000)]
    test_iw: usize,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// New total epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Importance samples L.
    #[arg(long, default_value_t = 5000)]
    iw: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Evaluate the first N rows only.
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Monte Carlo samples per classifier.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Condition every sample on this cluster.
    #[arg(long)]
    class: Option<usize>,
    /// Output image (binary PGM).
    #[arg(long)]
    grid: PathBuf,
    /// Images per grid row.
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Write binary samples instead of Bernoulli means.
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    /// Directory for decomposition.tsv and latents.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load(path: &Path) -> Result<(Checkpoint<f32>, TrainConfig)> {
    let c = checkpoint::load::<f32>(path)?;
    let cfg = TrainConfig::from_checkpoint_meta(&c.meta)?;
    Ok((c, cfg))
}

fn data_dir(args: &DataArgs, dataset: &str) -> Result<PathBuf> {
    match &args.data_dir {
        Some(d) => Ok(d.clone()),
        None => Ok(default_data_dir(dataset.parse()?)),
    }
}

fn split_rows(cfg: &TrainConfig, data: &DataArgs, split: SplitArg, rows: Option<usize>) -> Result<Dataset> {
    let d = cfg.load_data(&data_dir(data, &cfg.dataset)?)?;
    let ds = d.split(split.into());
    Ok(rows.map_or_else(|| ds.clone(), |n| ds.head(n)))
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset: DatasetName = a.dataset.into();
    if a.labels > 0 && a.variant == VariantArg::Vae {
        return Err(usage("--labels requires --variant cagem"));
    }
    let clusters = a.clusters.unwrap_or(dataset.classes());
    if a.variant == VariantArg::Cagem && clusters < 2 {
        return Err(usage("--clusters must be at least 2"));
    }
    if a.labels > 0 && clusters != dataset.classes() {
        return Err(usage(format!("labelled training needs --clusters {}", dataset.classes())));
    }
    let mut model = match a.variant {
        VariantArg::Cagem => ModelConfig::cagem(0, clusters),
        VariantArg::Vae => ModelConfig::vae(0),
    };
    model.hidden = a.hidden;
    model.z1_dim = a.z1;
    model.z2_dim = a.z2;
    let variant = model.variant;
    let run_id = match variant {
        Variant::Cagem => format!("{dataset}-cagem{}-k{clusters}-s{}", a.labels, a.seed),
        Variant::Vae => format!("{dataset}-vae-s{}", a.seed),
    };
    let mut cfg = TrainConfig::new(run_id, dataset.as_str(), model);
    cfg.schedule = Schedule {
        epochs: a.epochs,
        batch_size: a.batch_size,
        labelled_batch: a.labelled_batch,
        warmup_epochs: a.warmup,
        eval_every: a.eval_every,
        ..Schedule::default()
    };
    cfg.labels = a.labels;
    cfg.beta = a.beta;
    cfg.seed = a.seed;
    cfg.patience = a.patience;
    cfg.valid_rows = a.valid_rows;
    cfg.train_rows = a.train_rows;
    cfg.test_iw = a.test_iw;
    let data = cfg.load_data(&data_dir(&a.data, dataset.as_str())?)?;
    cfg.model.x_dim = data.train.x_dim();
    let mut t = Trainer::<f32>::new(cfg, &data, &a.out)?;
    report(t.run()?)
}

fn report(s: cagem::train::RunSummary) -> Result<()> {
    let doc = json!({
        "epochs": s.epochs,
        "best_valid_elbo": s.best_valid,
        "best_epoch": s.best_epoch,
        "last_valid_elbo": s.last_valid,
        "test_iw_bound": s.test_bound,
    });
    println!("{doc}");
    Ok(())
}

fn resume(a: ResumeArgs) -> Result<()> {
    let (c, cfg) = load(&a.checkpoint)?;
    drop(c);
    let data = cfg.load_data(&data_dir(&a.data, &cfg.dataset)?)?;
    let mut t = Trainer::<f32>::resume(&a.checkpoint, &data, a.epochs, None)?;
    report(t.run()?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.iw == 0 {
        return Err(usage("--iw must be at least 1"));
    }
    let (c, cfg) = load(&a.checkpoint)?;
    let ds = split_rows(&cfg, &a.data, a.split, a.rows)?;
    let mut rng = stream_rng(a.seed, 0);
    let x: Array2<f32> = binarize(ds.images.view(), &mut rng)?;
    let est = model_iw_bound(&c.model, &x, a.iw, &mut rng)?;
    let doc = json!({
        "run_id": cfg.run_id,
        "split": ds.split,
        "rows": ds.len(),
        "metric": "iw_bound",
        "iw": a.iw,
        "value": est.bound,
        "std_err": est.std_err,
        "seed": a.seed,
    });
    println!("{doc}");
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let (c, cfg) = load(&a.checkpoint)?;
    if c.model.variant() == Variant::Vae {
        return Err(usage("the VAE has no classifier"));
    }
    let ds = split_rows(&cfg, &a.data, a.split, a.rows)?;
    let labels = ds.labels.clone().ok_or_else(|| Error::DegenerateData("split has no labels".into()))?;
    let mut rng = stream_rng(a.seed, 0);
    let x: Array2<f32> = binarize(ds.images.view(), &mut rng)?;
    let q = q_classifier(&c.model, &x, a.samples, &mut rng)?;
    let p = p_classifier(&c.model, &x, a.samples, &mut rng)?;
    let doc = json!({
        "run_id": cfg.run_id,
        "split": ds.split,
        "rows": ds.len(),
        "samples": a.samples,
        "error_q": error_rate(&q, &labels)?,
        "error_p": error_rate(&p, &labels)?,
        "seed": a.seed,
    });
    println!("{doc}");
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let (c, _) = load(&a.checkpoint)?;
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if a.class.is_some() && c.model.variant() == Variant::Vae {
        return Err(usage("--class needs a cluster-aware model"));
    }
    let mut rng = stream_rng(a.seed, 0);
    let g = c.model.generate(a.n, a.class, &mut rng)?;
    let images = if a.binary { g.samples } else { g.means };
    let x_dim = c.model.config().x_dim;
    let (h, w) = pgm::square_side(x_dim).map_or((1, x_dim), |s| (s, s));
    pgm::write_grid(&a.grid, &images.mapv(f64::from), h, w, a.cols)?;
    println!("{}", json!({ "grid": a.grid, "n": a.n, "y": g.y, "seed": a.seed }));
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let (c, cfg) = load(&a.checkpoint)?;
    let ds = split_rows(&cfg, &a.data, a.split, Some(a.rows))?;
    let mut rng = stream_rng(a.seed, 0);
    let x: Array2<f32> = binarize(ds.images.view(), &mut rng)?;
    let d = elbo_decompose(&c.model, &x, &mut rng)?;
    let table = latent_export(&c.model, &x, ds.labels.as_deref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut tsv = String::from("term\tnats\n");
    for (k, v) in d.rows() {
        tsv.push_str(&format!("{k}\t{v}\n"));
    }
    for (j, v) in d.activity.kl_z2_per_unit.iter().enumerate() {
        tsv.push_str(&format!("kl_z2_unit_{j}\t{v}\n"));
    }
    let dp = a.out.join("decomposition.tsv");
    fs::write(&dp, tsv).map_err(|e| Error::io(&dp, e))?;
    let lp = a.out.join("latents.tsv");
    fs::write(&lp, table.to_tsv()).map_err(|e| Error::io(&lp, e))?;
    let terms: serde_json::Map<String, serde_json::Value> =
        d.rows().iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    println!("{}", json!({ "run_id": cfg.run_id, "rows": ds.len(), "terms": terms, "seed": a.seed }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Train(a) => train(a),
        Command::Resume(a) => resume(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Classify(a) => classify(a),
        Command::Sample(a) => sample(a),
        Command::Diagnose(a) => diagnose(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
