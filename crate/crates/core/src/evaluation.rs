//! Importance-weighted likelihood bounds, latent-activity diagnostics and
//! latent exports.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::distributions::kl_term;
use crate::error::{Error, Result};
use crate::model::{repeat_rows, ElboNoise, Model, Variant};
use crate::nets::{BatchNormMode, Forward, Input};
use crate::params::GroupSet;
use crate::scalar::Real;

pub const DEFAULT_CHUNK: usize = 100;

/// Anything that can draw independent log importance weights
/// `log p(x, h) - log q(h | x)` for a fixed batch of examples.
pub trait LogWeightSource {
    fn batch(&self) -> usize;

    /// `batch x reps` table of independent log-weights.
    fn sample_log_weights<R: Rng>(&self, reps: usize, rng: &mut R) -> Result<Array2<f64>>;
}

/// A model bound to a batch of binary observations.
pub struct ModelData<'a, F> {
    pub model: &'a Model<F>,
    pub x: &'a Array2<F>,
    /// Upper bound on example rows (`examples * reps`) per forward pass.
    pub max_rows: usize,
}

impl<'a, F: Real> ModelData<'a, F> {
    pub fn new(model: &'a Model<F>, x: &'a Array2<F>) -> Self {
        Self {
            model,
            x,
            max_rows: 4096,
        }
    }
}

impl<F: Real> LogWeightSource for ModelData<'_, F> {
    fn batch(&self) -> usize {
        self.x.nrows()
    }

    fn sample_log_weights<R: Rng>(&self, reps: usize, rng: &mut R) -> Result<Array2<f64>> {
        let n = self.x.nrows();
        let mut out = Array2::zeros((n, reps));
        let group = (self.max_rows / reps.max(1)).max(1);
        let mut start = 0;
        while start < n {
            let end = (start + group).min(n);
            let xs = repeat_rows(&self.x.slice(ndarray::s![start..end, ..]).to_owned(), reps);
            let noise = ElboNoise::sample(self.model.config(), xs.nrows(), rng);
            let w = self.model.log_weights(&xs, &noise)?;
            for (i, v) in w.into_iter().enumerate() {
                out[[start + i / reps, i % reps]] = v;
            }
            start = end;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IwEstimate {
    /// Mean over examples of the per-example bound, nats.
    pub bound: f64,
    pub per_example: Vec<f64>,
    /// Standard error of `bound` across examples.
    pub std_err: f64,
    pub samples: usize,
    pub chunk: usize,
}

/// `F_L = log (1/L) sum_l w_l` per example, accumulated chunk by chunk with a
/// running log-sum-exp.
pub fn iw_bound<S: LogWeightSource, R: Rng>(
    source: &S,
    samples: usize,
    chunk: usize,
    rng: &mut R,
) -> Result<IwEstimate> {
    if samples == 0 {
        return Err(Error::Config("importance sample count must be at least 1".into()));
    }
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let n = source.batch();
    let mut running = vec![f64::NEG_INFINITY; n];
    let mut done = 0;
    while done < samples {
        let reps = chunk.min(samples - done);
        let w = source.sample_log_weights(reps, rng)?;
        for (acc, row) in running.iter_mut().zip(w.axis_iter(Axis(0))) {
            for &v in row {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        term: "importance weight".into(),
                    });
                }
                *acc = log_add_exp(*acc, v);
            }
        }
        done += reps;
    }
    let log_l = (samples as f64).ln();
    let per_example: Vec<f64> = running.into_iter().map(|v| v - log_l).collect();
    let (bound, std_err) = mean_and_se(&per_example);
    Ok(IwEstimate {
        bound,
        per_example,
        std_err,
        samples,
        chunk,
    })
}

/// [`iw_bound`] for a model on a batch of binary images.
pub fn model_iw_bound<F: Real, R: Rng>(
    model: &Model<F>,
    x: &Array2<F>,
    samples: usize,
    rng: &mut R,
) -> Result<IwEstimate> {
    iw_bound(&ModelData::new(model, x), samples, DEFAULT_CHUNK, rng)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-layer activity: class-weighted analytic KL divergences, averaged over
/// examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityReport {
    /// `sum_c w_c KL[q(z2 | x, c, z1) || p(z2)]`.
    pub kl_z2: f64,
    /// `kl_z2` split by unit.
    pub kl_z2_per_unit: Vec<f64>,
    /// `sum_c w_c KL[q(z1 | x) || p(z1 | c, z2^c)]`.
    pub kl_z1: f64,
}

/// Per-example averages of the terms of a `tau = 1` ELBO:
/// `elbo = recon - kl_z2 + z2_residual + z1_class_terms`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub recon: f64,
    pub kl_z2: f64,
    /// Sampled `log p(z2) - log q(z2)` minus its analytic expectation.
    pub z2_residual: f64,
    /// `log p(z1|y,z2) + log p(y|z2) - log q(y|z1,x) - log q(z1|x)`, class-weighted.
    pub z1_class_terms: f64,
    pub elbo: f64,
    pub activity: ActivityReport,
}

impl Decomposition {
    pub fn rows(&self) -> [(&'static str, f64); 7] {
        [
            ("recon", self.recon),
            ("kl_z2", self.kl_z2),
            ("z2_residual", self.z2_residual),
            ("z1_class_terms", self.z1_class_terms),
            ("elbo", self.elbo),
            ("activity_kl_z2", self.activity.kl_z2),
            ("activity_kl_z1", self.activity.kl_z1),
        ]
    }
}

pub fn elbo_decompose<F: Real, R: Rng>(
    model: &Model<F>,
    x: &Array2<F>,
    rng: &mut R,
) -> Result<Decomposition> {
    let noise = ElboNoise::sample(model.config(), x.nrows(), rng);
    elbo_decompose_with_noise(model, x, &noise)
}

pub fn elbo_decompose_with_noise<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    noise: &ElboNoise<F>,
) -> Result<Decomposition> {
    let mut fwd = Forward::new(&model.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
    let p = model.pass(&mut fwd, x, noise)?;
    let n = p.batch;
    if n == 0 {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    let val = |v| fwd.value(v).mapv(|e: F| e.as_f64());
    let (m1, l1) = (val(p.q_z1.0), val(p.q_z1.1));
    let (m2, l2) = (val(p.q_z2.0), val(p.q_z2.1));
    let (mp1, lp1) = (val(p.p_z1.0), val(p.p_z1.1));
    let log_w = val(p.log_w);
    let (px, pz1, py, pz2, qz2, qz1) = (
        val(p.log_px),
        val(p.log_pz1),
        val(p.log_py),
        val(p.log_pz2),
        val(p.log_qz2),
        val(p.log_qz1),
    );
    let z2_dim = m2.ncols();
    let mut d = Decomposition {
        recon: 0.0,
        kl_z2: 0.0,
        z2_residual: 0.0,
        z1_class_terms: 0.0,
        elbo: 0.0,
        activity: ActivityReport {
            kl_z2: 0.0,
            kl_z2_per_unit: vec![0.0; z2_dim],
            kl_z1: 0.0,
        },
    };
    for b in 0..n {
        for c in 0..p.k {
            let r = b * p.k + c;
            let w = log_w[[b, c]].exp();
            let mut kl2 = 0.0;
            for j in 0..z2_dim {
                let kl = kl_term(m2[[r, j]], l2[[r, j]], 0.0, 0.0);
                d.activity.kl_z2_per_unit[j] += w * kl;
                kl2 += kl;
            }
            let mut kl1 = 0.0;
            for j in 0..m1.ncols() {
                kl1 += kl_term(m1[[b, j]], l1[[b, j]], mp1[[r, j]], lp1[[r, j]]);
            }
            let z1_terms = pz1[[r, 0]] + py[[r, 0]] - log_w[[b, c]] - qz1[[b, 0]];
            let z2_terms = pz2[[r, 0]] - qz2[[r, 0]];
            d.recon += w * px[[r, 0]];
            d.kl_z2 += w * kl2;
            d.z2_residual += w * (z2_terms + kl2);
            d.z1_class_terms += w * z1_terms;
            d.elbo += w * (px[[r, 0]] + z1_terms + z2_terms);
            d.activity.kl_z1 += w * kl1;
        }
    }
    let nf = n as f64;
    for v in [
        &mut d.recon,
        &mut d.kl_z2,
        &mut d.z2_residual,
        &mut d.z1_class_terms,
        &mut d.elbo,
        &mut d.activity.kl_z1,
    ] {
        *v /= nf;
    }
    for v in d.activity.kl_z2_per_unit.iter_mut() {
        *v /= nf;
    }
    d.activity.kl_z2 = d.kl_z2;
    Ok(d)
}

/// Posterior means and their 2-d principal-component projections.
#[derive(Debug, Clone)]
pub struct LatentTable {
    pub labels: Option<Vec<usize>>,
    pub z1: Array2<f64>,
    /// For the cluster-aware model: `sum_c q(c | mu1, x) mu2(x, c, mu1)`.
    pub z2: Array2<f64>,
    pub z1_pca: Array2<f64>,
    pub z2_pca: Array2<f64>,
}

impl LatentTable {
    /// Tab-separated text with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("id\tlabel");
        for j in 0..self.z1.ncols() {
            let _ = write!(out, "\tz1_{j}");
        }
        for j in 0..self.z2.ncols() {
            let _ = write!(out, "\tz2_{j}");
        }
        out.push_str("\tz1_pc1\tz1_pc2\tz2_pc1\tz2_pc2\n");
        for i in 0..self.z1.nrows() {
            let _ = write!(out, "{i}\t");
            if let Some(l) = &self.labels {
                let _ = write!(out, "{}", l[i]);
            }
            for v in self.z1.row(i).iter().chain(self.z2.row(i).iter()) {
                let _ = write!(out, "\t{v}");
            }
            for v in self.z1_pca.row(i).iter().chain(self.z2_pca.row(i).iter()) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn latent_export<F: Real>(
    model: &Model<F>,
    x: &Array2<F>,
    labels: Option<&[usize]>,
) -> Result<LatentTable> {
    if let Some(l) = labels {
        if l.len() != x.nrows() {
            return Err(Error::dim("labels", x.nrows(), l.len()));
        }
    }
    model.check_batch(x)?;
    let cfg = model.config();
    let mut fwd = Forward::new(&model.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
    let xv = fwd.constant(x.clone());
    let (m1, _) = model.heads.q_z1.forward(&mut fwd, &[Input::Dense(xv)])?;
    let zeros2 = Array2::zeros((x.nrows() * cfg.class_rows(), cfg.z2_dim));
    let z1 = m1;
    let log_w = model.class_log_weights(&mut fwd, xv, z1)?;
    let ((m2, _), _) = model.encode_z2(&mut fwd, xv, z1, &zeros2)?;
    let z1_mean = fwd.value(m1).mapv(|v| v.as_f64());
    let w = fwd.value(log_w).mapv(|v| v.as_f64().exp());
    let m2 = fwd.value(m2).mapv(|v| v.as_f64());
    let k = cfg.class_rows();
    let z2_mean = match model.variant() {
        Variant::Vae => m2,
        Variant::Cagem => Array2::from_shape_fn((x.nrows(), cfg.z2_dim), |(b, j)| {
            (0..k).map(|c| w[[b, c]] * m2[[b * k + c, j]]).sum()
        }),
    };
    Ok(LatentTable {
        labels: labels.map(|l| l.to_vec()),
        z1_pca: pca_2d(&z1_mean)?,
        z2_pca: pca_2d(&z2_mean)?,
        z1: z1_mean,
        z2: z2_mean,
    })
}

/// Projection of the centered rows onto the top two right singular vectors.
/// Each component's largest-magnitude loading is made positive.
pub fn pca_2d(data: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::DegenerateData(format!("PCA needs at least 2 rows, got {n}")));
    }
    let mean: Array1<f64> = data.mean_axis(Axis(0)).expect("non-empty");
    let centered = data - &mean;
    let scale = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::DegenerateData(
            "all rows are identical; principal components are undefined".into(),
        ));
    }
    let m = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = Array2::zeros((n, 2));
    for (slot, &comp) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = v_t.row(comp).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            out[[i, slot]] = centered.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    struct Constant(f64);

    impl LogWeightSource for Constant {
        fn batch(&self) -> usize {
            3
        }
        fn sample_log_weights<R: Rng>(&self, reps: usize, _: &mut R) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((3, reps), self.0))
        }
    }

    #[test]
    fn constant_weights_give_their_log() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        for l in [1, 7, 250] {
            let est = iw_bound(&Constant(-3.25), l, 100, &mut rng).unwrap();
            assert!((est.bound + 3.25).abs() < 1e-12);
        }
        assert!(iw_bound(&Constant(0.0), 0, 100, &mut rng).is_err());
        assert!(matches!(
            iw_bound(&Constant(f64::NAN), 5, 100, &mut rng),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        assert!(matches!(pca_2d(&array![[1.0, 2.0]]), Err(Error::DegenerateData(_))));
        assert!(matches!(
            pca_2d(&array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]),
            Err(Error::DegenerateData(_))
        ));
    }
}
