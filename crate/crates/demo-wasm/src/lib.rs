//! Browser bindings for the static demo page in `www/`: importance-weighted
//! bounds on a one-dimensional linear-Gaussian model, the training
//! schedules, and a small cluster-aware model trained on 3x3 bar images.

use cagem::data::binarize;
use cagem::distributions::{gaussian_log_prob, GaussianParams};
use cagem::evaluation::{iw_bound, LogWeightSource};
use cagem::model::{standard_normal, Model, ModelConfig};
use cagem::objective::{compute_alpha, training_step, LabelledBatch, StepConfig};
use cagem::optim::Adam;
use cagem::train::{stream_rng, Schedule};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: cagem::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Sample counts at which [`iw_curve`] evaluates the bound.
pub const IW_LEVELS: [usize; 10] = [1, 2, 5, 10, 20, 50, 100, 500, 1000, 5000];

#[wasm_bindgen]
pub fn iw_levels() -> Vec<u32> {
    IW_LEVELS.iter().map(|&l| l as u32).collect()
}

/// `z ~ N(0, 1)`, `x | z ~ N(slope z, noise^2)`, observed at a single `x`,
/// with a proposal whose mean is scaled by `shrink` and whose standard
/// deviation is scaled by `widen` relative to the exact posterior.
struct LinearGaussian {
    x: f64,
    slope: f64,
    noise: f64,
    proposal: GaussianParams<f64>,
}

impl LinearGaussian {
    fn new(x: f64, slope: f64, noise: f64, shrink: f64, widen: f64) -> Result<Self, JsError> {
        if !(noise > 0.0 && widen > 0.0) || ![x, slope, shrink].iter().all(|v| v.is_finite()) {
            return Err(JsError::new("noise and widen must be positive, other inputs finite"));
        }
        let prec = 1.0 + slope * slope / (noise * noise);
        let mean = slope * x / (noise * noise) / prec;
        let std = prec.powf(-0.5);
        let proposal = GaussianParams::new(vec![shrink * mean], vec![(widen * std).ln()]).map_err(js)?;
        Ok(Self { x, slope, noise, proposal })
    }

    fn exact(&self) -> f64 {
        let var = self.slope * self.slope + self.noise * self.noise;
        let p = GaussianParams::new(vec![0.0], vec![0.5 * var.ln()]).expect("finite");
        gaussian_log_prob(&[self.x], &p).expect("one dimension")
    }
}

impl LogWeightSource for LinearGaussian {
    fn batch(&self) -> usize {
        1
    }

    fn sample_log_weights<R: Rng>(&self, reps: usize, rng: &mut R) -> cagem::Result<Array2<f64>> {
        let eps: Array2<f64> = standard_normal(1, reps, rng);
        let prior = GaussianParams::standard(1);
        let q = &self.proposal;
        let mut out = Array2::zeros((1, reps));
        for (o, e) in out.iter_mut().zip(eps.iter()) {
            let z = q.mean[0] + q.log_std[0].exp() * e;
            let lik = GaussianParams::new(vec![self.slope * z], vec![self.noise.ln()])?;
            *o = gaussian_log_prob(&[z], &prior)? + gaussian_log_prob(&[self.x], &lik)? - gaussian_log_prob(&[z], q)?;
        }
        Ok(out)
    }
}

/// `[log p(x), F_L for each of IW_LEVELS]`.
#[wasm_bindgen]
pub fn iw_curve(x: f64, slope: f64, noise: f64, shrink: f64, widen: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let toy = LinearGaussian::new(x, slope, noise, shrink, widen)?;
    let mut out = vec![toy.exact()];
    for (i, &l) in IW_LEVELS.iter().enumerate() {
        let mut rng = stream_rng(seed as u64, i as u64);
        out.push(iw_bound(&toy, l, 1000, &mut rng).map_err(js)?.bound);
    }
    Ok(out)
}

/// Learning rate for every epoch followed by the temperature for every epoch.
#[wasm_bindgen]
pub fn schedule_curves(epochs: u32, warmup: u32, lr0: f64, decay: f64, decay_every: u32) -> Result<Vec<f64>, JsError> {
    let s = Schedule {
        lr0,
        lr_decay: decay,
        decay_every: decay_every as usize,
        warmup_epochs: warmup as usize,
        epochs: epochs as usize,
        ..Schedule::default()
    };
    s.validate().map_err(js)?;
    let e = 0..s.epochs;
    Ok(e.clone().map(|e| s.lr(e)).chain(e.map(|e| s.tau(e))).collect())
}

const SIDE: usize = 3;
const COPIES: usize = 8;
const BATCH: usize = 16;

/// Horizontal (class 0), vertical (1) and diagonal (2) bars.
fn bar_patterns() -> (Array2<f32>, Vec<usize>) {
    let mut masks: Vec<(usize, Vec<usize>)> = Vec::new();
    for k in 0..SIDE {
        masks.push((0, (0..SIDE).map(|j| k * SIDE + j).collect()));
        masks.push((1, (0..SIDE).map(|j| j * SIDE + k).collect()));
    }
    masks.push((2, (0..SIDE).map(|j| j * (SIDE + 1)).collect()));
    masks.push((2, (0..SIDE).map(|j| (j + 1) * (SIDE - 1)).collect()));
    let n = masks.len() * COPIES;
    let mut x = Array2::from_elem((n, SIDE * SIDE), 0.05f32);
    let mut y = Vec::with_capacity(n);
    for (i, (class, px)) in masks.iter().cycle().take(n).enumerate() {
        for &p in px {
            x[[i, p]] = 0.95;
        }
        y.push(*class);
    }
    (x, y)
}

/// A three-cluster model trained in the page on dynamically binarized bars.
#[wasm_bindgen]
pub struct BarsDemo {
    model: Model<f64>,
    adam: Adam<f64>,
    schedule: Schedule,
    images: Array2<f32>,
    labels: Vec<usize>,
    /// Rows whose class is revealed; empty when training without labels.
    labelled: Vec<usize>,
    rng: ChaCha8Rng,
    epoch: usize,
}

#[wasm_bindgen]
impl BarsDemo {
    /// `labels_per_class == 0` trains without labels.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, labels_per_class: u32) -> Result<BarsDemo, JsError> {
        let config = ModelConfig {
            x_dim: SIDE * SIDE,
            z1_dim: 2,
            z2_dim: 2,
            hidden: vec![16],
            ..ModelConfig::cagem(SIDE * SIDE, 3)
        };
        let model = Model::new(config, seed as u64).map_err(js)?;
        let (images, labels) = bar_patterns();
        let mut labelled = Vec::new();
        for c in 0..3 {
            let rows = labels.iter().enumerate().filter(|(_, &y)| y == c).map(|(i, _)| i);
            labelled.extend(rows.take(labels_per_class as usize));
        }
        Ok(BarsDemo {
            adam: Adam::new(model.store.len()),
            model,
            schedule: Schedule { lr0: 3e-3, warmup_epochs: 30, ..Schedule::default() },
            images,
            labels,
            labelled,
            rng: stream_rng(seed as u64, 1),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch as u32
    }

    /// Runs `epochs` passes over the data; returns the mean ELBO of the last pass.
    pub fn train(&mut self, epochs: u32) -> Result<f64, JsError> {
        let n = self.images.nrows();
        let alpha = match self.labelled.len() {
            0 => 0.0,
            l => compute_alpha(0.1, n, l).map_err(js)?,
        };
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let cfg = StepConfig {
                lr: self.schedule.lr(self.epoch),
                tau: self.schedule.tau(self.epoch),
                alpha,
                n_unlabelled: n,
                n_labelled: self.labelled.len(),
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for rows in order.chunks(BATCH) {
                let x: Array2<f64> = binarize(self.images.select(Axis(0), rows).view(), &mut self.rng).map_err(js)?;
                let xl: Array2<f64> = binarize(self.images.select(Axis(0), &self.labelled).view(), &mut self.rng).map_err(js)?;
                let yl: Vec<usize> = self.labelled.iter().map(|&i| self.labels[i]).collect();
                let lab = (!yl.is_empty()).then_some(LabelledBatch { x: &xl, labels: &yl });
                let out = training_step(&mut self.model, &mut self.adam, &x, lab, &cfg, &mut self.rng).map_err(js)?;
                total += out.elbo_sum;
            }
            last = total / n as f64;
            self.epoch += 1;
        }
        Ok(last)
    }

    /// `n` Bernoulli-mean images (row-major, 9 values each) generated with
    /// the cluster fixed to `class`.
    pub fn samples(&mut self, class: u32, n: u32) -> Result<Vec<f64>, JsError> {
        let g = self.model.generate(n as usize, Some(class as usize), &mut self.rng).map_err(js)?;
        Ok(g.means.iter().copied().collect())
    }
}
