//! Independent scalar re-implementation of the model, reading weights by
//! name from the parameter store. Used as an oracle by the integration tests.
#![allow(dead_code)]

use cagem::distributions::{
    bernoulli_log_prob, categorical_log_prob, gaussian_log_prob, BernoulliParams,
    CategoricalParams, GaussianParams,
};
use cagem::data::{Dataset, DatasetName, Datasets, Split};
use cagem::evaluation::LogWeightSource;
use cagem::model::{ElboNoise, Model, ModelConfig, Variant};
use cagem::nets::BN_EPS;
use cagem::Result;
use rand_distr::StandardNormal;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy_config(variant: Variant, k: usize, x_dim: usize, z: usize) -> ModelConfig {
    ModelConfig {
        variant,
        x_dim,
        z1_dim: z,
        z2_dim: z,
        clusters: if variant == Variant::Vae { 1 } else { k },
        hidden: vec![3, 2],
        batch_norm: true,
    }
}

/// Random weights of moderate scale and non-trivial batch-norm statistics.
pub fn scramble(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model
            .store
            .value_mut(id)
            .mapv_inplace(|_| r.random_range(-1.0..1.0));
    }
    let bufs: Vec<_> = model.store.buffer_ids().collect();
    for b in bufs {
        let is_var = model.store.buffer_name(b).ends_with("bn_var");
        model.store.buffer_mut(b).mapv_inplace(|_| {
            if is_var {
                r.random_range(0.2..2.0)
            } else {
                r.random_range(-0.5..0.5)
            }
        });
    }
}

pub fn binary_batch(n: usize, d: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || if r.random::<bool>() { 1.0 } else { 0.0 })
}

pub fn one_hot(c: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[c] = 1.0;
    v
}

pub struct Oracle<'a> {
    pub model: &'a Model<f64>,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model<f64>) -> Self {
        Self { model }
    }

    fn p(&self, name: &str) -> &Array2<f64> {
        let s = &self.model.store;
        s.value(s.find(name).unwrap_or_else(|| panic!("missing parameter {name}")))
    }

    fn affine(&self, name: &str, input: &[f64]) -> Vec<f64> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        (0..w.ncols())
            .map(|j| b[[0, j]] + (0..w.nrows()).map(|i| input[i] * w[[i, j]]).sum::<f64>())
            .collect()
    }

    fn norm_relu(&self, prefix: &str, h: Vec<f64>) -> Vec<f64> {
        let h = if self.model.config().batch_norm {
            let s = &self.model.store;
            let g = self.p(&format!("{prefix}.bn_gamma"));
            let bt = self.p(&format!("{prefix}.bn_beta"));
            let rm = s.buffer(s.find_buffer(&format!("{prefix}.bn_mean")).unwrap());
            let rv = s.buffer(s.find_buffer(&format!("{prefix}.bn_var")).unwrap());
            h.iter()
                .enumerate()
                .map(|(j, v)| (v - rm[j]) / (rv[j] + BN_EPS).sqrt() * g[[0, j]] + bt[[0, j]])
                .collect()
        } else {
            h
        };
        h.into_iter().map(|v| v.max(0.0)).collect()
    }

    /// Trunk output; `blocks` are (block name, input vector) in declared order.
    pub fn trunk(&self, head: &str, blocks: &[(&str, &[f64])]) -> Vec<f64> {
        let bias = self.p(&format!("{head}.l0.b"));
        let mut h: Vec<f64> = bias.row(0).to_vec();
        for (name, input) in blocks {
            let w = self.p(&format!("{head}.l0.w_{name}"));
            assert_eq!(w.nrows(), input.len(), "{head} block {name}");
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += (0..w.nrows()).map(|i| input[i] * w[[i, j]]).sum::<f64>();
            }
        }
        h = self.norm_relu(&format!("{head}.l0"), h);
        for l in 1..self.model.config().hidden.len() {
            h = self.affine(&format!("{head}.l{l}"), &h);
            h = self.norm_relu(&format!("{head}.l{l}"), h);
        }
        h
    }

    pub fn gaussian(&self, head: &str, blocks: &[(&str, &[f64])]) -> GaussianParams<f64> {
        let d = self.trunk(head, blocks);
        GaussianParams::new(
            self.affine(&format!("{head}.mean"), &d),
            self.affine(&format!("{head}.log_std"), &d),
        )
        .unwrap()
    }

    pub fn categorical(&self, head: &str, blocks: &[(&str, &[f64])]) -> CategoricalParams<f64> {
        let d = self.trunk(head, blocks);
        let logits = self.affine(&format!("{head}.out"), &d);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        CategoricalParams::new(e.into_iter().map(|v| v / s).collect()).unwrap()
    }

    pub fn bernoulli(&self, head: &str, blocks: &[(&str, &[f64])]) -> BernoulliParams<f64> {
        let d = self.trunk(head, blocks);
        let logits = self.affine(&format!("{head}.out"), &d);
        BernoulliParams::new(logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect()).unwrap()
    }

    fn rsample(p: &GaussianParams<f64>, eps: &[f64]) -> Vec<f64> {
        cagem::distributions::gaussian_rsample(p, eps).unwrap()
    }

    /// Per-class components for example `b`:
    /// (w_c, log p(x|c,z1), log p(z1|c,z2), log p(c|z2), log p(z2), log q(z2), log q(z1)).
    pub fn components(&self, x: &[f64], e1: &[f64], e2: &[Vec<f64>]) -> Vec<[f64; 7]> {
        let cfg = self.model.config();
        let q1 = self.gaussian("q_z1", &[("x", x)]);
        let z1 = Self::rsample(&q1, e1);
        let lq1 = gaussian_log_prob(&z1, &q1).unwrap();
        let std2 = GaussianParams::standard(cfg.z2_dim);
        match cfg.variant {
            Variant::Vae => {
                let q2 = self.gaussian("q_z2", &[("z1", &z1)]);
                let z2 = Self::rsample(&q2, &e2[0]);
                let p1 = self.gaussian("p_z1", &[("z2", &z2)]);
                let px = self.bernoulli("p_x", &[("z1", &z1)]);
                vec![[
                    1.0,
                    bernoulli_log_prob(x, &px).unwrap(),
                    gaussian_log_prob(&z1, &p1).unwrap(),
                    0.0,
                    gaussian_log_prob(&z2, &std2).unwrap(),
                    gaussian_log_prob(&z2, &q2).unwrap(),
                    lq1,
                ]]
            }
            Variant::Cagem => {
                let k = cfg.clusters;
                let qy = self.categorical("q_y", &[("x", x), ("z1", &z1)]);
                (0..k)
                    .map(|c| {
                        let y = one_hot(c, k);
                        let q2 = self.gaussian("q_z2", &[("x", x), ("z1", &z1), ("y", &y)]);
                        let z2 = Self::rsample(&q2, &e2[c]);
                        let py = self.categorical("p_y", &[("z2", &z2)]);
                        let p1 = self.gaussian("p_z1", &[("y", &y), ("z2", &z2)]);
                        let px = self.bernoulli("p_x", &[("y", &y), ("z1", &z1)]);
                        [
                            qy.probs[c],
                            bernoulli_log_prob(x, &px).unwrap(),
                            gaussian_log_prob(&z1, &p1).unwrap(),
                            categorical_log_prob(c, &py).unwrap(),
                            gaussian_log_prob(&z2, &std2).unwrap(),
                            gaussian_log_prob(&z2, &q2).unwrap(),
                            lq1,
                        ]
                    })
                    .collect()
            }
        }
    }

    fn rows(&self, x: &Array2<f64>, noise: &ElboNoise<f64>, b: usize) -> Vec<[f64; 7]> {
        let k = self.model.config().class_rows();
        let e2: Vec<Vec<f64>> = (0..k).map(|c| noise.z2.row(b * k + c).to_vec()).collect();
        self.components(&x.row(b).to_vec(), &noise.z1.row(b).to_vec(), &e2)
    }

    /// Explicit class enumeration of the ELBO for example `b`.
    pub fn elbo(&self, x: &Array2<f64>, noise: &ElboNoise<f64>, tau: f64, b: usize) -> f64 {
        self.rows(x, noise, b)
            .iter()
            .map(|[w, px, pz1, py, pz2, qz2, qz1]| {
                w * (px + tau * (pz1 + py + pz2 - w.ln() - qz1 - qz2))
            })
            .sum()
    }

    /// `log sum_c w_c p(x,c,z1,z2^c) / (w_c q(z1) q(z2^c))`.
    pub fn log_weight(&self, x: &Array2<f64>, noise: &ElboNoise<f64>, b: usize) -> f64 {
        let s: f64 = self
            .rows(x, noise, b)
            .iter()
            .map(|[_, px, pz1, py, pz2, qz2, qz1]| (px + pz1 + py + pz2 - qz2 - qz1).exp())
            .sum();
        s.ln()
    }

    /// `q(y | x)` at one `z1` draw.
    pub fn q_class(&self, x: &[f64], e1: &[f64]) -> Vec<f64> {
        let q1 = self.gaussian("q_z1", &[("x", x)]);
        let z1 = Self::rsample(&q1, e1);
        self.categorical("q_y", &[("x", x), ("z1", &z1)]).probs
    }

    /// Cascade `sum_c q(c|z1,x) pi_theta(z2^c)` at one draw.
    pub fn p_class(&self, x: &[f64], e1: &[f64], e2: &[Vec<f64>]) -> Vec<f64> {
        let k = self.model.config().clusters;
        let q1 = self.gaussian("q_z1", &[("x", x)]);
        let z1 = Self::rsample(&q1, e1);
        let qy = self.categorical("q_y", &[("x", x), ("z1", &z1)]);
        let mut out = vec![0.0; k];
        for c in 0..k {
            let y = one_hot(c, k);
            let q2 = self.gaussian("q_z2", &[("x", x), ("z1", &z1), ("y", &y)]);
            let z2 = Self::rsample(&q2, &e2[c]);
            let py = self.categorical("p_y", &[("z2", &z2)]);
            for j in 0..k {
                out[j] += qy.probs[c] * py.probs[j];
            }
        }
        out
    }

    pub fn prior_class(&self, z2: &[f64]) -> Vec<f64> {
        self.categorical("p_y", &[("z2", z2)]).probs
    }
}

/// Sets every parameter whose name starts with one of `prefixes` and ends
/// with one of `suffixes` to `value`.
pub fn fill(model: &mut Model<f64>, prefixes: &[&str], suffixes: &[&str], value: f64) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if prefixes.iter().any(|p| name.starts_with(p)) && suffixes.iter().any(|s| name.ends_with(s)) {
            model.store.value_mut(id).fill(value);
        }
    }
}

/// Central finite-difference check of `grad` against `f` for every scalar of
/// every parameter in `ids`.
pub fn check_gradients(
    model: &Model<f64>,
    ids: &[cagem::params::ParamId],
    grads: &cagem::autodiff::Gradients<f64>,
    f: impl Fn(&Model<f64>) -> f64,
) -> usize {
    let h = 1e-5;
    let mut checked = 0;
    for &id in ids {
        let shape = model.store.value(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = model.clone();
                plus.store.value_mut(id)[[r, c]] += h;
                let mut minus = model.clone();
                minus.store.value_mut(id)[[r, c]] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let ad = grads.get(id).map(|g| g[[r, c]]).unwrap_or(0.0);
                let scale = ad.abs().max(fd.abs());
                assert!(
                    (ad - fd).abs() <= 1e-3 * scale || (ad - fd).abs() < 1e-6,
                    "{}[{r},{c}]: analytic {ad} vs numeric {fd}",
                    model.store.name(id)
                );
                checked += 1;
            }
        }
    }
    checked
}

/// `z ~ N(0, 1)`, `x | z ~ N(a z, s^2)` with a deliberately mismatched
/// Gaussian proposal.
pub struct LinearGaussian {
    pub xs: Vec<f64>,
    pub a: f64,
    pub s: f64,
}

impl LinearGaussian {
    pub fn standard() -> Self {
        LinearGaussian {
            xs: vec![-1.7, -0.3, 0.4, 2.2],
            a: 1.5,
            s: 0.8,
        }
    }

    pub fn exact_log_px(&self, x: f64) -> f64 {
        let var: f64 = self.a * self.a + self.s * self.s;
        let p = GaussianParams::new(vec![0.0], vec![0.5 * var.ln()]).unwrap();
        gaussian_log_prob(&[x], &p).unwrap()
    }

    fn proposal(&self, x: f64) -> GaussianParams<f64> {
        let prec = 1.0 + self.a * self.a / (self.s * self.s);
        let mean = self.a * x / (self.s * self.s) / prec;
        let std = prec.powf(-0.5);
        GaussianParams::new(vec![0.9 * mean], vec![(1.3 * std).ln()]).unwrap()
    }
}

impl LogWeightSource for LinearGaussian {
    fn batch(&self) -> usize {
        self.xs.len()
    }

    fn sample_log_weights<R: Rng>(&self, reps: usize, rng: &mut R) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.xs.len(), reps));
        let prior = GaussianParams::standard(1);
        let lik_ls = self.s.ln();
        for (i, &x) in self.xs.iter().enumerate() {
            let q = self.proposal(x);
            for j in 0..reps {
                let e: f64 = rng.sample(StandardNormal);
                let z = q.mean[0] + q.log_std[0].exp() * e;
                let lik = GaussianParams::new(vec![self.a * z], vec![lik_ls]).unwrap();
                out[[i, j]] = gaussian_log_prob(&[z], &prior)? + gaussian_log_prob(&[x], &lik)?
                    - gaussian_log_prob(&[z], &q)?;
            }
        }
        Ok(out)
    }
}

/// Copies a one-cluster model into a VAE: the `y` one-hot is a constant
/// input, so its weight row folds into the first-layer bias, and the skip
/// connection from `x` into `q(z2 | .)` is zeroed.
pub fn vae_from_single_cluster(cagem: &mut Model<f64>) -> Model<f64> {
    let mut cfg = cagem.config().clone();
    cfg.variant = Variant::Vae;
    let mut vae = Model::<f64>::new(cfg, 0).unwrap();
    fill(cagem, &["q_z2.l0.w_x"], &["w_x"], 0.0);
    let cs = &cagem.store;
    let ids: Vec<_> = vae.store.ids().collect();
    for id in ids {
        let name = vae.store.name(id).to_string();
        let mut v = cs.value(cs.find(&name).unwrap()).clone();
        if name.ends_with(".l0.b") {
            let head = name.trim_end_matches(".l0.b");
            if let Some(wy) = cs.find(&format!("{head}.l0.w_y")) {
                v += &cs.value(wy).row(0);
            }
        }
        *vae.store.value_mut(id) = v;
    }
    let bufs: Vec<_> = vae.store.buffer_ids().collect();
    for b in bufs {
        let name = vae.store.buffer_name(b).to_string();
        *vae.store.buffer_mut(b) = cs.buffer(cs.find_buffer(&name).unwrap()).clone();
    }
    vae
}

/// 3x3 images of a horizontal (class 0), vertical (1) or diagonal (2) bar.
pub fn bars(n: usize, seed: u64, split: Split) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 9));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        let k = r.random_range(0..3);
        for j in 0..3 {
            let p = match c {
                0 => k * 3 + j,
                1 => j * 3 + k,
                _ => j * 4,
            };
            x[[i, p]] = 0.9;
        }
        for v in x.row_mut(i) {
            if *v == 0.0 {
                *v = r.random_range(0.0..0.1);
            }
        }
        y.push(c);
    }
    Dataset::new(x, Some(y), split, 3).unwrap()
}

pub fn bars_data() -> Datasets {
    Datasets {
        name: DatasetName::Mnist10k,
        train: bars(60, 1, Split::Train),
        valid: bars(12, 2, Split::Valid),
        test: bars(9, 3, Split::Test),
    }
}
