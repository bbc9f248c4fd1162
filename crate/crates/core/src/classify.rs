//! The inference classifier `q(y|x)` and the cascade classifier `p(y|x)`.
//!
//! Both return one simplex row per example.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{standard_normal, ElboNoise, Model, Variant};
use crate::nets::{BatchNormMode, Forward};
use crate::params::GroupSet;
use crate::scalar::Real;

pub const DEFAULT_SAMPLES: usize = 100;

fn require_cagem<F: Real>(model: &Model<F>) -> Result<()> {
    if model.variant() != Variant::Cagem {
        return Err(Error::Config("the VAE has no classifier".into()));
    }
    Ok(())
}

/// `q(y|x) ~= (1/S) sum_s pi_phi(z1_s, x)` with `z1_s ~ q(z1|x)`.
pub fn q_classifier<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let z1 = model.config().z1_dim;
    let noise: Vec<Array2<F>> = (0..samples)
        .map(|_| standard_normal(x.nrows(), z1, rng))
        .collect();
    q_classifier_with_noise(model, x, &noise)
}

/// [`q_classifier`] with one `batch x z1_dim` noise matrix per sample.
pub fn q_classifier_with_noise<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    noise: &[Array2<F>],
) -> Result<Array2<f64>> {
    require_cagem(model)?;
    if noise.is_empty() {
        return Err(Error::Config("classifier needs at least one sample".into()));
    }
    model.check_batch(x)?;
    let k = model.config().clusters;
    let mut acc = Array2::<f64>::zeros((x.nrows(), k));
    for eps in noise {
        if eps.dim() != (x.nrows(), model.config().z1_dim) {
            return Err(Error::dim("z1 noise rows", x.nrows(), eps.nrows()));
        }
        let mut fwd = Forward::new(&model.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
        let xv = fwd.constant(x.clone());
        let (_, z1) = model.encode_z1(&mut fwd, xv, eps)?;
        let log_w = model.class_log_weights(&mut fwd, xv, z1)?;
        acc.zip_mut_with(fwd.value(log_w), |a, &l| *a += l.as_f64().exp());
    }
    acc /= noise.len() as f64;
    Ok(acc)
}

/// `p(y|x) ~= (1/S) sum_s sum_c q(c|z1_s,x) pi_theta(z2_s^c)` with
/// `z2_s^c ~ q(z2|x,c,z1_s)`.
pub fn p_classifier<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    let noise: Vec<ElboNoise<F>> = (0..samples)
        .map(|_| ElboNoise::sample(model.config(), x.nrows(), rng))
        .collect();
    p_classifier_with_noise(model, x, &noise)
}

pub fn p_classifier_with_noise<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    noise: &[ElboNoise<F>],
) -> Result<Array2<f64>> {
    require_cagem(model)?;
    if noise.is_empty() {
        return Err(Error::Config("classifier needs at least one sample".into()));
    }
    model.check_batch(x)?;
    let b = x.nrows();
    let k = model.config().clusters;
    let mut acc = Array2::<f64>::zeros((b, k));
    for eps in noise {
        model.check_noise(b, eps)?;
        let mut fwd = Forward::new(&model.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
        let xv = fwd.constant(x.clone());
        let (_, z1) = model.encode_z1(&mut fwd, xv, &eps.z1)?;
        let log_w = model.class_log_weights(&mut fwd, xv, z1)?;
        let (_, z2) = model.encode_z2(&mut fwd, xv, z1, &eps.z2)?;
        let table = model
            .prior_class_log_probs(&mut fwd, z2)?
            .expect("cluster-aware model has a class prior");
        let w = fwd.value(log_w);
        let t = fwd.value(table);
        for row in 0..b {
            for c in 0..k {
                let wc = w[[row, c]].as_f64().exp();
                for j in 0..k {
                    acc[[row, j]] += wc * t[[row * k + c, j]].as_f64().exp();
                }
            }
        }
    }
    acc /= noise.len() as f64;
    Ok(acc)
}

/// Argmax of each row, ties to the lowest index.
pub fn predictions(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax differs from the label.
pub fn error_rate(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::DegenerateData("error rate of an empty set".into()));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::dim("labels", probs.nrows(), labels.len()));
    }
    let wrong = predictions(probs)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn error_rate_examples() {
        let probs = array![[0.9, 0.1], [0.2, 0.8]];
        assert_eq!(error_rate(&probs, &[0, 1]).unwrap(), 0.0);
        assert_eq!(error_rate(&probs, &[1, 0]).unwrap(), 1.0);
        assert!(error_rate(&Array2::zeros((0, 2)), &[]).is_err());
        // ties resolve to the lowest index
        assert_eq!(predictions(&array![[0.5, 0.5]]), vec![0]);
    }
}
