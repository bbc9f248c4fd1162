//! Training orchestration: schedules, labelled-batch cycling, periodic
//! validation, checkpoints and the metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, check_config};
use crate::data::{binarize, draw_labelled_subset, load_dataset, Dataset, DatasetName, Datasets, LabelledSubset};
use crate::error::{Error, Result};
use crate::evaluation::model_iw_bound;
use crate::model::{ElboNoise, Model, ModelConfig, Variant};
use crate::nets::{BN_EPS, BN_MOMENTUM};
use crate::objective::{compute_alpha, training_step, LabelledBatch, StepConfig, DEFAULT_BETA};
use crate::optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::pgm;
use crate::scalar::Real;

/// Rows per forward pass when evaluating a split.
const EVAL_BATCH: usize = 250;

// RNG stream ids derived from the run seed
const STREAM_TRAIN: u64 = 1;
const STREAM_VALID: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_SAMPLES: u64 = 4;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Epochs over which the KL temperature ramps linearly from 0 to 1.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Labelled rows per step; smaller labelled sets are used whole.
    pub labelled_batch: usize,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.75,
            decay_every: 50,
            warmup_epochs: 100,
            epochs: 1000,
            batch_size: 256,
            labelled_batch: 64,
            eval_every: 1,
        }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn tau(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("bad learning rate {} / decay {}", self.lr0, self.lr_decay)));
        }
        if self.decay_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("decay and evaluation intervals must be positive".into()));
        }
        if self.batch_size < 2 || self.labelled_batch < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub dataset: String,
    pub model: ModelConfig,
    pub schedule: Schedule,
    /// Size of the labelled subset; 0 trains without labels.
    pub labels: usize,
    pub beta: f64,
    pub seed: u64,
    /// Stop when validation has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Evaluate validation on at most this many rows.
    pub valid_rows: Option<usize>,
    /// Importance samples for the final test bound; 0 skips it.
    pub test_iw: usize,
    /// Train on the first rows of the train split only.
    #[serde(default)]
    pub train_rows: Option<usize>,
}

impl TrainConfig {
    pub fn new(run_id: impl Into<String>, dataset: impl Into<String>, model: ModelConfig) -> Self {
        Self {
            run_id: run_id.into(),
            dataset: dataset.into(),
            model,
            schedule: Schedule::default(),
            labels: 0,
            beta: DEFAULT_BETA,
            seed: 0,
            patience: None,
            valid_rows: None,
            test_iw: 5000,
            train_rows: None,
        }
    }

    /// Reads the run configuration stored in a checkpoint's metadata.
    pub fn from_checkpoint_meta(meta: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(meta["config"].clone())?)
    }

    /// Loads the named dataset from `dir` and applies `train_rows`.
    pub fn load_data(&self, dir: &Path) -> Result<Datasets> {
        let name: DatasetName = self.dataset.parse()?;
        let mut d = load_dataset(name, dir)?;
        if let Some(n) = self.train_rows {
            d.train = d.train.head(n);
        }
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.labels > 0 && self.model.variant == Variant::Vae {
            return Err(Error::Config("labelled training requires the cluster-aware variant".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    /// Importance samples behind a likelihood bound.
    pub iw: Option<usize>,
    pub seed: u64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// `u128` word position as a decimal string.
    word_pos: String,
}

impl RngState {
    fn capture(r: &ChaCha8Rng) -> Self {
        Self { seed: r.get_seed(), stream: r.get_stream(), word_pos: r.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        let pos = self.word_pos.parse().map_err(|_| Error::Integrity("bad rng word position".into()))?;
        r.set_word_pos(pos);
        Ok(r)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    /// Completed epochs.
    epoch: usize,
    label_order: Vec<usize>,
    label_cursor: usize,
    best_valid: Option<f64>,
    best_epoch: Option<usize>,
    rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    progress: Progress,
    subset: Option<LabelledSubset>,
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }
    pub fn last(&self) -> PathBuf {
        self.0.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }
    pub fn halt(&self) -> PathBuf {
        self.0.join("halt.ckpt")
    }
    pub fn halt_report(&self) -> PathBuf {
        self.0.join("halt.json")
    }
    pub fn samples(&self) -> PathBuf {
        self.0.join("samples.pgm")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub last_valid: Option<f64>,
    pub test_bound: Option<f64>,
}

/// Mean single-sample ELBO (`tau = 1`) over the first `rows` rows of a
/// split, binarized and noised from `rng`.
pub fn evaluate_elbo<F: Real>(
    model: &Model<F>,
    ds: &Dataset,
    rows: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = rows.map_or(ds.len(), |r| r.min(ds.len()));
    if n == 0 {
        return Err(Error::DegenerateData(format!("{} split is empty", ds.split)));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x: Array2<F> = binarize(ds.rows(chunk).view(), rng)?;
        let noise = ElboNoise::sample(model.config(), chunk.len(), rng);
        total += model.elbo(&x, &noise, 1.0)?.elbo.iter().sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Writes a grid of Bernoulli means: one row per cluster (at most 10
/// clusters, 10 samples each) or a 10 x 10 grid for the VAE.
pub fn sample_grid<F: Real>(model: &Model<F>, path: &Path, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, STREAM_SAMPLES);
    let cfg = model.config();
    let mut images = Vec::new();
    match cfg.variant {
        Variant::Cagem => {
            for c in 0..cfg.clusters.min(10) {
                images.push(model.generate(10, Some(c), &mut rng)?.means);
            }
        }
        Variant::Vae => images.push(model.generate(100, None, &mut rng)?.means),
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let all = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths").mapv(F::as_f64);
    let (h, w) = pgm::square_side(cfg.x_dim).map_or((1, cfg.x_dim), |s| (s, s));
    pgm::write_grid(path, &all, h, w, 10)
}

pub struct Trainer<'d, F> {
    cfg: TrainConfig,
    data: &'d Datasets,
    subset: Option<LabelledSubset>,
    labelled_x: Option<(Array2<f32>, Vec<usize>)>,
    pub model: Model<F>,
    pub adam: Adam<F>,
    rng: ChaCha8Rng,
    progress: Progress,
    best_model: Option<Model<F>>,
    run: RunDir,
    metrics: File,
}

impl<'d, F: Real> Trainer<'d, F> {
    /// Starts a fresh run in `out`, truncating any previous metrics log.
    pub fn new(cfg: TrainConfig, data: &'d Datasets, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let subset = match cfg.labels {
            0 => None,
            n => Some(draw_labelled_subset(&data.train, n, cfg.seed)?),
        };
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(model.store.len());
        let progress = Progress {
            epoch: 0,
            label_order: (0..subset.as_ref().map_or(0, |s| s.len())).collect(),
            label_cursor: 0,
            best_valid: None,
            best_epoch: None,
            rng: RngState::capture(&stream_rng(cfg.seed, STREAM_TRAIN)),
        };
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let run = RunDir(out.to_path_buf());
        let metrics = File::create(run.metrics()).map_err(|e| Error::io(run.metrics(), e))?;
        let t = Self::assemble(cfg, data, subset, model, adam, progress, run, metrics)?;
        t.write_config()?;
        Ok(t)
    }

    /// Continues the run stored in `ckpt`; its directory becomes the run
    /// directory. `epochs` extends (or shortens) the schedule and `expect`
    /// rejects checkpoints built with a different architecture.
    pub fn resume(ckpt: &Path, data: &'d Datasets, epochs: Option<usize>, expect: Option<&ModelConfig>) -> Result<Self> {
        let c = checkpoint::load::<F>(ckpt)?;
        let meta: Meta = serde_json::from_value(c.meta)?;
        let mut cfg = meta.config;
        if let Some(e) = expect {
            check_config(e, c.model.config())?;
        }
        if let Some(e) = epochs {
            cfg.schedule.epochs = e;
        }
        let dir = ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let run = RunDir(dir);
        // keep only records of completed epochs
        let kept: Vec<MetricRecord> = match read_metrics(&run.metrics()) {
            Ok(r) => r.into_iter().filter(|m| m.epoch < meta.progress.epoch).collect(),
            Err(Error::Io { .. }) => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut metrics = File::create(run.metrics()).map_err(|e| Error::io(run.metrics(), e))?;
        for m in &kept {
            writeln!(metrics, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(run.metrics(), e))?;
        }
        let best_model = match meta.progress.best_epoch {
            Some(_) if run.best().is_file() => Some(checkpoint::load::<F>(&run.best())?.model),
            _ => None,
        };
        let mut t = Self::assemble(cfg, data, meta.subset, c.model, c.adam, meta.progress, run, metrics)?;
        t.best_model = best_model;
        t.write_config()?;
        Ok(t)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        data: &'d Datasets,
        subset: Option<LabelledSubset>,
        model: Model<F>,
        adam: Adam<F>,
        progress: Progress,
        run: RunDir,
        metrics: File,
    ) -> Result<Self> {
        if data.train.x_dim() != cfg.model.x_dim {
            return Err(Error::Config(format!(
                "model expects {} inputs, dataset has {}",
                cfg.model.x_dim,
                data.train.x_dim()
            )));
        }
        if cfg.model.variant == Variant::Cagem && subset.is_some() && cfg.model.clusters != data.train.classes {
            return Err(Error::Config(format!(
                "labelled training needs one cluster per class ({} classes, {} clusters)",
                data.train.classes, cfg.model.clusters
            )));
        }
        let labelled_x = match &subset {
            Some(s) => Some((data.train.rows(&s.indices), data.train.labels_at(&s.indices)?)),
            None => None,
        };
        Ok(Self {
            rng: progress.rng.restore()?,
            cfg,
            data,
            subset,
            labelled_x,
            model,
            adam,
            progress,
            best_model: None,
            run,
            metrics,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.progress.epoch
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    fn alpha(&self) -> Result<f64> {
        match &self.subset {
            Some(s) => compute_alpha(self.cfg.beta, self.data.train.len(), s.len()),
            None => Ok(0.0),
        }
    }

    fn write_config(&self) -> Result<()> {
        let doc = json!({
            "config": self.cfg,
            "dtype": F::DTYPE,
            "checkpoint_version": checkpoint::VERSION,
            "alpha": self.alpha()?,
            "n_unlabelled": self.data.train.len(),
            "n_labelled": self.subset.as_ref().map_or(0, |s| s.len()),
            "labelled_indices": self.subset.as_ref().map(|s| &s.indices),
            "splits": {
                "train": self.data.train.len(),
                "valid": self.data.valid.len(),
                "test": self.data.test.len(),
            },
            "adam": { "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS },
            "batch_norm": { "eps": BN_EPS, "momentum": BN_MOMENTUM },
            "seeds": {
                "init": self.cfg.seed,
                "labelled_subset": self.cfg.seed,
                "train_stream": STREAM_TRAIN,
                "valid_stream": STREAM_VALID,
                "test_stream": STREAM_TEST,
                "sample_stream": STREAM_SAMPLES,
            },
        });
        let path = self.run.config();
        fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }

    fn log(&mut self, epoch: usize, metric: &str, value: f64, iw: Option<usize>) -> Result<()> {
        let rec = MetricRecord {
            run_id: self.cfg.run_id.clone(),
            epoch,
            metric: metric.to_string(),
            value,
            iw,
            seed: self.cfg.seed,
        };
        let path = self.run.metrics();
        writeln!(self.metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))
    }

    fn meta(&self) -> Result<serde_json::Value> {
        let mut progress = self.progress.clone();
        progress.rng = RngState::capture(&self.rng);
        Ok(serde_json::to_value(Meta { config: self.cfg.clone(), progress, subset: self.subset.clone() })?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.adam, &self.meta()?)
    }

    /// Next labelled positions into the subset, reshuffling on wrap-around.
    fn next_labelled(&mut self) -> Option<(Array2<F>, Vec<usize>)> {
        let n = self.progress.label_order.len();
        if n == 0 {
            return None;
        }
        let take = if n <= self.cfg.schedule.labelled_batch { n } else { self.cfg.schedule.labelled_batch };
        let mut pos = Vec::with_capacity(take);
        if take == n {
            pos.extend_from_slice(&self.progress.label_order);
        } else {
            while pos.len() < take {
                if self.progress.label_cursor == n {
                    self.progress.label_order.shuffle(&mut self.rng);
                    self.progress.label_cursor = 0;
                }
                pos.push(self.progress.label_order[self.progress.label_cursor]);
                self.progress.label_cursor += 1;
            }
        }
        let (x, y) = self.labelled_x.as_ref().expect("labelled rows exist with a subset");
        let xb = x.select(ndarray::Axis(0), &pos);
        let xb = binarize(xb.view(), &mut self.rng).expect("intensities validated at load");
        Some((xb, pos.iter().map(|&p| y[p]).collect()))
    }

    fn halt(&self, epoch: usize, step: usize, err: &Error) -> Result<()> {
        self.save(&self.run.halt())?;
        let report = json!({
            "epoch": epoch,
            "step": step,
            "error": err.to_string(),
            "lr": self.cfg.schedule.lr(epoch),
            "tau": self.cfg.schedule.tau(epoch),
            "parameters_finite": self.model.store.all_finite(),
        });
        let path = self.run.halt_report();
        fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(path, e))
    }

    /// Trains one epoch and returns the mean training ELBO per example.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let e = self.progress.epoch;
        let sched = self.cfg.schedule.clone();
        let train = &self.data.train;
        let n_l = self.subset.as_ref().map_or(0, |s| s.len());
        let step_cfg = StepConfig {
            lr: sched.lr(e),
            tau: sched.tau(e),
            alpha: self.alpha()?,
            n_unlabelled: train.len(),
            n_labelled: n_l,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut elbo, mut ce_p, mut ce_q, mut seen, mut steps) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (step, chunk) in order.chunks(sched.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let xu: Array2<F> = binarize(train.rows(chunk).view(), &mut self.rng)?;
            let lab = self.next_labelled();
            let batch = lab.as_ref().map(|(x, labels)| LabelledBatch { x, labels });
            let out = match training_step(&mut self.model, &mut self.adam, &xu, batch, &step_cfg, &mut self.rng) {
                Ok(o) => o,
                Err(err @ Error::NonFinite { .. }) => {
                    self.halt(e, step, &err)?;
                    return Err(err);
                }
                Err(err) => return Err(err),
            };
            elbo += out.elbo_sum / train.len() as f64 * chunk.len() as f64;
            if n_l > 0 {
                ce_p += out.ce_p / n_l as f64;
                ce_q += out.ce_q / n_l as f64;
            }
            seen += chunk.len();
            steps += 1;
        }
        let mean_elbo = elbo / seen.max(1) as f64;
        self.log(e, "lr", step_cfg.lr, None)?;
        self.log(e, "tau", step_cfg.tau, None)?;
        self.log(e, "train_elbo", mean_elbo, None)?;
        if n_l > 0 {
            self.log(e, "train_ce_p", ce_p / steps.max(1) as f64, None)?;
            self.log(e, "train_ce_q", ce_q / steps.max(1) as f64, None)?;
        }
        self.progress.epoch = e + 1;
        Ok(mean_elbo)
    }

    /// Validation F_1 on the (capped) validation split with a fixed stream,
    /// so successive evaluations see the same binarization and noise.
    pub fn validate(&self) -> Result<f64> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_VALID);
        evaluate_elbo(&self.model, &self.data.valid, self.cfg.valid_rows, &mut rng)
    }

    /// Runs until the schedule's epoch count or early stopping, then
    /// computes the test bound of the best model and writes a sample grid.
    pub fn run(&mut self) -> Result<RunSummary> {
        let sched = self.cfg.schedule.clone();
        let mut last_valid = None;
        while self.progress.epoch < sched.epochs {
            self.train_epoch()?;
            let done = self.progress.epoch;
            if done % sched.eval_every == 0 || done == sched.epochs {
                let v = self.validate()?;
                self.log(done - 1, "valid_elbo", v, Some(1))?;
                last_valid = Some(v);
                if self.progress.best_valid.is_none_or(|b| v > b) {
                    self.progress.best_valid = Some(v);
                    self.progress.best_epoch = Some(done);
                    self.best_model = Some(self.model.clone());
                    self.save(&self.run.best())?;
                }
            }
            self.save(&self.run.last())?;
            if let (Some(p), Some(b)) = (self.cfg.patience, self.progress.best_epoch) {
                if done >= b + p {
                    break;
                }
            }
        }
        let best = self.best_model.as_ref().unwrap_or(&self.model);
        sample_grid(best, &self.run.samples(), self.cfg.seed)?;
        let mut test_bound = None;
        if self.cfg.test_iw > 0 {
            let mut rng = stream_rng(self.cfg.seed, STREAM_TEST);
            let x: Array2<F> = binarize(self.data.test.images.view(), &mut rng)?;
            let est = model_iw_bound(best, &x, self.cfg.test_iw, &mut rng)?;
            let (epoch, iw) = (self.progress.epoch, self.cfg.test_iw);
            self.log(epoch, "test_iw_bound", est.bound, Some(iw))?;
            test_bound = Some(est.bound);
        }
        self.metrics.flush().map_err(|e| Error::io(self.run.metrics(), e))?;
        Ok(RunSummary {
            epochs: self.progress.epoch,
            best_valid: self.progress.best_valid,
            best_epoch: self.progress.best_epoch,
            last_valid,
            test_bound,
        })
    }
}

/// Trains a fresh model; see [`Trainer`].
pub fn run_training<F: Real>(cfg: TrainConfig, data: &Datasets, out: &Path) -> Result<(Model<F>, RunSummary)> {
    let mut t = Trainer::<F>::new(cfg, data, out)?;
    let summary = t.run()?;
    Ok((t.model, summary))
}

/// Opens a metrics log for appending; used by commands that add records to
/// an existing run.
pub fn append_metric(path: &Path, rec: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}
