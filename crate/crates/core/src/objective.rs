//! Semi-supervised objective: unlabelled ELBO plus labelled cross-entropies
//! that may only move the two classifier heads.
//!
//! Per step the minimized loss is
//! `-mean_u F + alpha * (N_l / N_u) * mean_l (H_p + H_q)`,
//! which is `-I / N_u` in expectation.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Gradients, Var};
use crate::error::{Error, Result};
use crate::model::{pick, ElboNoise, Model, Variant};
use crate::nets::{apply_batch_norm_updates, BatchNormMode, Forward};
use crate::optim::Adam;
use crate::params::GroupSet;
use crate::scalar::Real;

pub const DEFAULT_BETA: f64 = 0.1;

/// `alpha = beta * (N_u + N_l) / N_l`.
pub fn compute_alpha(beta: f64, n_unlabelled: usize, n_labelled: usize) -> Result<f64> {
    if n_labelled == 0 {
        return Err(Error::Config("alpha needs at least one labelled example".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(beta * (n_unlabelled + n_labelled) as f64 / n_labelled as f64)
}

/// Objective terms on the sum-over-dataset scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// `N_u * mean F` over the unlabelled batch.
    pub elbo_sum: f64,
    /// `N_l * mean H_p` over the labelled batch.
    pub ce_p: f64,
    /// `N_l * mean H_q` over the labelled batch.
    pub ce_q: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Batch-mean ELBO and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct ElboGradient<F> {
    pub mean_elbo: f64,
    pub grads: Gradients<F>,
}

/// Batch-mean cross-entropies; `grads` is the gradient of
/// `mean(H_p) + mean(H_q)` and only contains classifier-head parameters.
#[derive(Debug, Clone)]
pub struct CrossEntropies<F> {
    pub ce_p: f64,
    pub ce_q: f64,
    pub grads: Gradients<F>,
}

/// Mean ELBO over the batch and its gradient. In `TrainCollect` mode the
/// batch-norm running statistics are updated.
pub fn elbo_gradient<F: Real>(
    model: &mut Model<F>,
    x: &Array2<F>,
    noise: &ElboNoise<F>,
    tau: f64,
    mode: BatchNormMode,
) -> Result<ElboGradient<F>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("temperature {tau} outside [0, 1]")));
    }
    let (result, updates) = {
        let mut fwd = Forward::new(&model.store, mode, GroupSet::ALL);
        let pass = model.pass(&mut fwd, x, noise)?;
        let v = model.elbo_vars(&mut fwd, &pass, F::lit(tau));
        let mean = batch_mean(&mut fwd, v.elbo);
        let value = fwd.graph.scalar(mean).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "elbo".into() });
        }
        let grads = fwd.graph.backward(mean);
        let (_, updates) = fwd.into_parts();
        (
            ElboGradient {
                mean_elbo: value,
                grads,
            },
            updates,
        )
    };
    apply_batch_norm_updates(&mut model.store, &updates);
    Ok(result)
}

fn batch_mean<F: Real>(fwd: &mut Forward<'_, F>, col: Var) -> Var {
    let n = fwd.value(col).nrows();
    let s = fwd.graph.sum(col);
    fwd.graph.scale(s, F::one() / F::from_usize(n).expect("batch size"))
}

/// Per-example `(H_p, H_q)` graph handles with only the classifier heads
/// differentiable.
fn cross_entropy_vars<F: Real>(
    model: &Model<F>,
    fwd: &mut Forward<'_, F>,
    x: &Array2<F>,
    labels: &[usize],
    noise: &ElboNoise<F>,
) -> Result<(Var, Var)> {
    if model.variant() != Variant::Cagem {
        return Err(Error::Config("labelled training needs the cluster-aware model".into()));
    }
    model.check_batch(x)?;
    let b = x.nrows();
    if labels.len() != b {
        return Err(Error::dim("labels", b, labels.len()));
    }
    let k = model.config().clusters;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::IndexOutOfRange { index: bad, len: k });
    }
    model.check_noise(b, noise)?;

    let xv = fwd.constant(x.clone());
    let (_, z1) = model.encode_z1(fwd, xv, &noise.z1)?;
    let log_w = model.class_log_weights(fwd, xv, z1)?;
    let log_q = pick(fwd, log_w, labels.to_vec());
    let ce_q = fwd.graph.scale(log_q, -F::one());

    let (_, z2) = model.encode_z2(fwd, xv, z1, &noise.z2)?;
    let table = model
        .prior_class_log_probs(fwd, z2)?
        .expect("cluster-aware model has a class prior");
    let log_py = pick(fwd, table, (0..b * k).map(|r| labels[r / k]).collect());
    let log_w_rows = fwd.graph.reshape(log_w, b * k, 1);
    let joint = fwd.graph.add(log_py, log_w_rows);
    let joint = fwd.graph.reshape(joint, b, k);
    let log_p = fwd.graph.log_sum_exp_rows(joint);
    let ce_p = fwd.graph.scale(log_p, -F::one());
    Ok((ce_p, ce_q))
}

/// Labelled cross-entropies `H_p = -log p(y|x)` and `H_q = -log q(y|x)`,
/// each estimated with one `z1` draw (and one `z2` draw per class). Layers
/// normalize with the labelled batch's own statistics but the running
/// averages are left alone; only the classifier heads receive gradients.
pub fn labelled_cross_entropies<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    labels: &[usize],
    noise: &ElboNoise<F>,
) -> Result<CrossEntropies<F>> {
    let mut fwd = Forward::new(&model.store, BatchNormMode::TrainBatch, GroupSet::CLASS_HEADS);
    let (ce_p, ce_q) = cross_entropy_vars(model, &mut fwd, x, labels, noise)?;
    let mp = batch_mean(&mut fwd, ce_p);
    let mq = batch_mean(&mut fwd, ce_q);
    let total = fwd.graph.add(mp, mq);
    let (p, q) = (fwd.graph.scalar(mp).as_f64(), fwd.graph.scalar(mq).as_f64());
    if !p.is_finite() {
        return Err(Error::NonFinite { term: "H_p".into() });
    }
    if !q.is_finite() {
        return Err(Error::NonFinite { term: "H_q".into() });
    }
    let grads = fwd.graph.backward(total);
    Ok(CrossEntropies {
        ce_p: p,
        ce_q: q,
        grads,
    })
}

/// Labelled batch with its dataset-level sizes.
#[derive(Debug, Clone, Copy)]
pub struct LabelledBatch<'a, F> {
    pub x: &'a Array2<F>,
    pub labels: &'a [usize],
}

/// Step hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Size of the unlabelled set `N_u`.
    pub n_unlabelled: usize,
    /// Size of the labelled set `N_l` (0 when unsupervised).
    pub n_labelled: usize,
}

/// One Adam step on the objective, drawing fresh noise from `rng`.
pub fn training_step<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    unlabelled: &Array2<F>,
    labelled: Option<LabelledBatch<'_, F>>,
    cfg: &StepConfig,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let noise_u = ElboNoise::sample(model.config(), unlabelled.nrows(), rng);
    let noise_l = labelled.map(|l| ElboNoise::sample(model.config(), l.x.nrows(), rng));
    training_step_with_noise(model, adam, unlabelled, &noise_u, labelled, noise_l.as_ref(), cfg)
}

/// [`training_step`] with explicit noise. Only the unlabelled forward feeds
/// the batch-norm running averages; they are folded in before the labelled
/// forward.
pub fn training_step_with_noise<F: Real>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    unlabelled: &Array2<F>,
    noise_u: &ElboNoise<F>,
    labelled: Option<LabelledBatch<'_, F>>,
    noise_l: Option<&ElboNoise<F>>,
    cfg: &StepConfig,
) -> Result<LossBreakdown> {
    let eg = elbo_gradient(model, unlabelled, noise_u, cfg.tau, BatchNormMode::TrainCollect)?;
    let mut grads = eg.grads;
    grads.scale(-F::one());
    let n_u = cfg.n_unlabelled as f64;
    let mut out = LossBreakdown {
        elbo_sum: n_u * eg.mean_elbo,
        ce_p: 0.0,
        ce_q: 0.0,
        alpha: cfg.alpha,
        total: n_u * eg.mean_elbo,
    };
    if let Some(batch) = labelled {
        let noise = noise_l.ok_or_else(|| Error::Config("labelled batch without noise".into()))?;
        if cfg.n_labelled == 0 || cfg.n_unlabelled == 0 {
            return Err(Error::Config("labelled step needs non-zero set sizes".into()));
        }
        let ce = labelled_cross_entropies(model, batch.x, batch.labels, noise)?;
        let n_l = cfg.n_labelled as f64;
        grads.add_scaled(&ce.grads, F::lit(cfg.alpha * n_l / n_u));
        out.ce_p = n_l * ce.ce_p;
        out.ce_q = n_l * ce.ce_q;
        out.total = out.elbo_sum - cfg.alpha * (out.ce_p + out.ce_q);
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite { term: "gradient".into() });
    }
    adam.update(&mut model.store, &grads, cfg.lr);
    if !model.store.all_finite() {
        return Err(Error::NonFinite { term: "parameters".into() });
    }
    Ok(out)
}
