//! Diagonal Gaussian, Bernoulli and categorical families.
//!
//! All log-densities are summed over dimensions, so likelihoods come out in
//! nats per example.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const LOG_STD_MIN: f64 = -8.0;
pub const LOG_STD_MAX: f64 = 8.0;
/// Bernoulli means are kept in `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`.
pub const BERNOULLI_EPS: f64 = 1e-6;
/// Mass mixed uniformly into every categorical: `(1 - eta) p + eta / K`.
pub const CATEGORICAL_FLOOR: f64 = 1e-6;

pub(crate) fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Logit bound equivalent to the Bernoulli mean clamp.
pub fn bernoulli_logit_bound() -> f64 {
    ((1.0 - BERNOULLI_EPS) / BERNOULLI_EPS).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<F> {
    pub mean: Vec<F>,
    pub log_std: Vec<F>,
}

impl<F: Real> GaussianParams<F> {
    /// Clamps `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vec<F>, log_std: Vec<F>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::dim("gaussian log_std", mean.len(), log_std.len()));
        }
        let (lo, hi) = (F::lit(LOG_STD_MIN), F::lit(LOG_STD_MAX));
        let log_std = log_std
            .into_iter()
            .map(|v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![F::zero(); dim],
            log_std: vec![F::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliParams<F> {
    pub mean: Vec<F>,
}

impl<F: Real> BernoulliParams<F> {
    pub fn new(mean: Vec<F>) -> Result<Self> {
        let (lo, hi) = (F::lit(BERNOULLI_EPS), F::lit(1.0 - BERNOULLI_EPS));
        let mut out = Vec::with_capacity(mean.len());
        for m in mean {
            if !(m >= F::zero() && m <= F::one()) {
                return Err(Error::Domain(format!("bernoulli mean {m} outside [0, 1]")));
            }
            out.push(m.max(lo).min(hi));
        }
        Ok(Self { mean: out })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams<F> {
    pub probs: Vec<F>,
}

impl<F: Real> CategoricalParams<F> {
    /// Validates a simplex point (sum within 1e-6) and mixes in the floor mass.
    pub fn new(probs: Vec<F>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("categorical with no classes".into()));
        }
        let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
        if probs.iter().any(|p| !(p.as_f64() >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "categorical probabilities must be a simplex point (sum {total})"
            )));
        }
        let k = probs.len() as f64;
        if probs.len() == 1 {
            return Ok(Self {
                probs: vec![F::one()],
            });
        }
        let probs = probs
            .into_iter()
            .map(|p| F::lit((1.0 - CATEGORICAL_FLOOR) * p.as_f64() + CATEGORICAL_FLOOR / k))
            .collect();
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        let p = F::one() / F::from_usize(k).expect("class count");
        Self { probs: vec![p; k] }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn gaussian_log_prob<F: Real>(x: &[F], p: &GaussianParams<F>) -> Result<F> {
    if x.len() != p.dim() {
        return Err(Error::dim("gaussian_log_prob", p.dim(), x.len()));
    }
    let c = half_log_two_pi();
    let total: f64 = x
        .iter()
        .zip(&p.mean)
        .zip(&p.log_std)
        .map(|((&x, &m), &ls)| {
            let (x, m, ls) = (x.as_f64(), m.as_f64(), ls.as_f64());
            let u = (x - m) / ls.exp();
            -c - ls - 0.5 * u * u
        })
        .sum();
    Ok(F::lit(total))
}

/// `mean + exp(log_std) * noise`; the graph version lives in
/// [`crate::autodiff::Graph::reparam`].
pub fn gaussian_rsample<F: Real>(p: &GaussianParams<F>, noise: &[F]) -> Result<Vec<F>> {
    if noise.len() != p.dim() {
        return Err(Error::dim("gaussian_rsample noise", p.dim(), noise.len()));
    }
    Ok(p.mean
        .iter()
        .zip(&p.log_std)
        .zip(noise)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

/// Analytic `KL[q || p]` between diagonal Gaussians.
pub fn gaussian_kl<F: Real>(q: &GaussianParams<F>, p: &GaussianParams<F>) -> Result<F> {
    if q.dim() != p.dim() {
        return Err(Error::dim("gaussian_kl", q.dim(), p.dim()));
    }
    let mut total = 0.0;
    for d in 0..q.dim() {
        let (mq, lq) = (q.mean[d].as_f64(), q.log_std[d].as_f64());
        let (mp, lp) = (p.mean[d].as_f64(), p.log_std[d].as_f64());
        total += kl_term(mq, lq, mp, lp);
    }
    Ok(F::lit(total))
}

#[inline]
pub(crate) fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    let vq = (2.0 * lq).exp();
    let vp = (2.0 * lp).exp();
    lp - lq + (vq + (mq - mp) * (mq - mp)) / (2.0 * vp) - 0.5
}

pub fn bernoulli_log_prob<F: Real>(x: &[F], p: &BernoulliParams<F>) -> Result<F> {
    if x.len() != p.mean.len() {
        return Err(Error::dim("bernoulli_log_prob", p.mean.len(), x.len()));
    }
    let mut total = 0.0;
    for (&x, &m) in x.iter().zip(&p.mean) {
        let m = m.as_f64();
        total += if x == F::one() {
            m.ln()
        } else if x == F::zero() {
            (1.0 - m).ln()
        } else {
            return Err(Error::Domain(format!("bernoulli observation {x} is not binary")));
        };
    }
    Ok(F::lit(total))
}

pub fn categorical_log_prob<F: Real>(c: usize, p: &CategoricalParams<F>) -> Result<F> {
    p.probs
        .get(c)
        .map(|v| v.ln())
        .ok_or(Error::IndexOutOfRange {
            index: c,
            len: p.classes(),
        })
}
