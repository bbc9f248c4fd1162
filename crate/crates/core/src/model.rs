//! Generative and inference factorizations of the two-layer VAE and of the
//! cluster-aware model, with their single-sample ELBO estimators.
//!
//! Cluster-aware model:
//!
//! ```text
//! p(z2) = N(0, I)      p(y | z2) = Cat(pi_theta(z2))
//! p(z1 | y, z2)        p(x | y, z1) = Bernoulli
//! q(z1 | x)            q(y | z1, x) = Cat(pi_phi(z1, x))     q(z2 | x, y, z1)
//! ```
//!
//! The sum over `y` is done exactly: every example is expanded into `K`
//! class rows laid out as `b * K + c`, each with its own `z2` draw.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Var};
use crate::distributions::bernoulli_logit_bound;
use crate::error::{Error, Result};
use crate::nets::{
    apply_batch_norm_updates, BatchNormMode, BernoulliHead, Block, CategoricalHead, Forward,
    GaussianHead, Input, NetBuilder,
};
use crate::params::{GroupSet, ParamGroup, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vae,
    Cagem,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vae => "vae",
            Variant::Cagem => "cagem",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub x_dim: usize,
    pub z1_dim: usize,
    pub z2_dim: usize,
    /// Cluster count `K`; ignored by the VAE.
    pub clusters: usize,
    /// Hidden widths of every head's trunk.
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cagem(784, 10)
    }
}

impl ModelConfig {
    pub fn cagem(x_dim: usize, clusters: usize) -> Self {
        Self {
            variant: Variant::Cagem,
            x_dim,
            z1_dim: 64,
            z2_dim: 32,
            clusters,
            hidden: vec![1024, 512],
            batch_norm: true,
        }
    }

    pub fn vae(x_dim: usize) -> Self {
        Self {
            variant: Variant::Vae,
            clusters: 1,
            ..Self::cagem(x_dim, 1)
        }
    }

    /// `K` for the cluster-aware model, 1 for the VAE.
    pub fn class_rows(&self) -> usize {
        match self.variant {
            Variant::Vae => 1,
            Variant::Cagem => self.clusters,
        }
    }

    /// `K = 1` is accepted here (it is the single-cluster degenerate case);
    /// the command line requires at least two clusters.
    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.z1_dim == 0 || self.z2_dim == 0 {
            return Err(Error::Config("all dimensions must be at least 1".into()));
        }
        if self.variant == Variant::Cagem && self.clusters == 0 {
            return Err(Error::Config("cluster count must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Standard-normal noise for one ELBO evaluation.
///
/// `z2` has `batch * K` rows for the cluster-aware model (one independent
/// draw per class) and `batch` rows for the VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise<F> {
    pub z1: Array2<F>,
    pub z2: Array2<F>,
}

impl<F: Real> ElboNoise<F> {
    pub fn sample(config: &ModelConfig, batch: usize, rng: &mut impl Rng) -> Self {
        Self {
            z1: standard_normal(batch, config.z1_dim, rng),
            z2: standard_normal(batch * config.class_rows(), config.z2_dim, rng),
        }
    }

    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        Self {
            z1: Array2::zeros((batch, config.z1_dim)),
            z2: Array2::zeros((batch * config.class_rows(), config.z2_dim)),
        }
    }

    pub fn batch(&self) -> usize {
        self.z1.nrows()
    }
}

pub fn standard_normal<F: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Per-example ELBO terms, in nats.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    /// `sum_c w_c log p(x | c, z1)`.
    pub log_px: Vec<f64>,
    /// Class-weighted sum of every latent log-ratio term.
    pub latent_term: Vec<f64>,
    /// `q(y = c | z1, x)` at the drawn `z1`, `batch x K`.
    pub class_weights: Array2<f64>,
    pub elbo: Vec<f64>,
}

impl ElboTerms {
    pub fn mean_elbo(&self) -> f64 {
        self.elbo.iter().sum::<f64>() / self.elbo.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Heads {
    pub q_z1: GaussianHead,
    pub q_y: Option<CategoricalHead>,
    pub q_z2: GaussianHead,
    pub p_y: Option<CategoricalHead>,
    pub p_z1: GaussianHead,
    pub p_x: BernoulliHead,
}

/// Graph handles of one stochastic forward pass. Per-class quantities have
/// `batch * k` rows.
pub(crate) struct Pass {
    pub batch: usize,
    pub k: usize,
    pub q_z1: (Var, Var),
    /// `batch x 1`
    pub log_qz1: Var,
    /// `log q(y = c | z1, x)`, `batch x k` (zeros for the VAE).
    pub log_w: Var,
    pub q_z2: (Var, Var),
    pub log_qz2: Var,
    pub log_pz2: Var,
    pub log_py: Var,
    pub p_z1: (Var, Var),
    pub log_pz1: Var,
    pub log_px: Var,
}

/// Handles of the combined per-example ELBO, each `batch x 1`.
pub(crate) struct ElboVars {
    pub log_px: Var,
    pub latent: Var,
    pub elbo: Var,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    pub store: ParamStore<F>,
    pub(crate) heads: Heads,
}

impl<F: Real> Model<F> {
    /// Builds a model with Glorot-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = NetBuilder::new(&mut store, &mut rng, config.batch_norm);
        let h = config.hidden.clone();
        let (x, z1, z2) = (config.x_dim, config.z1_dim, config.z2_dim);
        let feat = Block::features;
        let heads = match config.variant {
            Variant::Vae => Heads {
                q_z1: b.gaussian_head("q_z1", vec![feat("x", x)], &h, z1, ParamGroup::Inference)?,
                q_y: None,
                q_z2: b.gaussian_head("q_z2", vec![feat("z1", z1)], &h, z2, ParamGroup::Inference)?,
                p_y: None,
                p_z1: b.gaussian_head("p_z1", vec![feat("z2", z2)], &h, z1, ParamGroup::Generative)?,
                p_x: b.bernoulli_head("p_x", vec![feat("z1", z1)], &h, x, ParamGroup::Generative)?,
            },
            Variant::Cagem => {
                let k = config.clusters;
                let class = Block::Class { classes: k };
                Heads {
                    q_z1: b.gaussian_head("q_z1", vec![feat("x", x)], &h, z1, ParamGroup::Inference)?,
                    q_y: Some(b.categorical_head(
                        "q_y",
                        vec![feat("x", x), feat("z1", z1)],
                        &h,
                        k,
                        ParamGroup::InferenceClass,
                    )?),
                    q_z2: b.gaussian_head(
                        "q_z2",
                        vec![feat("x", x), feat("z1", z1), class.clone()],
                        &h,
                        z2,
                        ParamGroup::Inference,
                    )?,
                    p_y: Some(b.categorical_head(
                        "p_y",
                        vec![feat("z2", z2)],
                        &h,
                        k,
                        ParamGroup::GenerativeClass,
                    )?),
                    p_z1: b.gaussian_head(
                        "p_z1",
                        vec![class.clone(), feat("z2", z2)],
                        &h,
                        z1,
                        ParamGroup::Generative,
                    )?,
                    p_x: b.bernoulli_head(
                        "p_x",
                        vec![class, feat("z1", z1)],
                        &h,
                        x,
                        ParamGroup::Generative,
                    )?,
                }
            }
        };
        Ok(Self { config, store, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub(crate) fn check_batch(&self, x: &Array2<F>) -> Result<()> {
        if x.ncols() != self.config.x_dim {
            return Err(Error::dim("x width", self.config.x_dim, x.ncols()));
        }
        if x.iter().any(|&v| v != F::zero() && v != F::one()) {
            return Err(Error::Domain("observations must be binary".into()));
        }
        Ok(())
    }

    pub(crate) fn check_noise(&self, batch: usize, noise: &ElboNoise<F>) -> Result<()> {
        let k = self.config.class_rows();
        if noise.z1.dim() != (batch, self.config.z1_dim) {
            return Err(Error::dim("z1 noise rows", batch, noise.z1.nrows()));
        }
        if noise.z2.dim() != (batch * k, self.config.z2_dim) {
            return Err(Error::dim("z2 noise rows", batch * k, noise.z2.nrows()));
        }
        Ok(())
    }

    /// `q(z1 | x)` parameters and a reparameterized draw.
    pub(crate) fn encode_z1(
        &self,
        fwd: &mut Forward<'_, F>,
        x: Var,
        noise: &Array2<F>,
    ) -> Result<((Var, Var), Var)> {
        let (m, ls) = self.heads.q_z1.forward(fwd, &[Input::Dense(x)])?;
        let z1 = fwd.graph.reparam(m, ls, noise.clone());
        Ok(((m, ls), z1))
    }

    /// `log q(y | z1, x)`, `batch x K`; zeros (`batch x 1`) for the VAE.
    pub(crate) fn class_log_weights(&self, fwd: &mut Forward<'_, F>, x: Var, z1: Var) -> Result<Var> {
        match &self.heads.q_y {
            Some(q_y) => q_y.log_probs(fwd, &[Input::Dense(x), Input::Dense(z1)]),
            None => {
                let b = fwd.value(z1).nrows();
                Ok(fwd.constant(Array2::zeros((b, 1))))
            }
        }
    }

    /// `q(z2 | x, c, z1)` for every class row, plus the draw.
    pub(crate) fn encode_z2(
        &self,
        fwd: &mut Forward<'_, F>,
        x: Var,
        z1: Var,
        noise: &Array2<F>,
    ) -> Result<((Var, Var), Var)> {
        let (m, ls) = match self.config.variant {
            Variant::Vae => self.heads.q_z2.forward(fwd, &[Input::Dense(z1)])?,
            Variant::Cagem => self.heads.q_z2.forward(
                fwd,
                &[Input::Tiled(x), Input::Tiled(z1), Input::ClassCycle],
            )?,
        };
        let z2 = fwd.graph.reparam(m, ls, noise.clone());
        Ok(((m, ls), z2))
    }

    /// Full `log p(y | z2)` table for each row of `z2`.
    pub(crate) fn prior_class_log_probs(&self, fwd: &mut Forward<'_, F>, z2: Var) -> Result<Option<Var>> {
        match &self.heads.p_y {
            Some(p_y) => Ok(Some(p_y.log_probs(fwd, &[Input::Dense(z2)])?)),
            None => Ok(None),
        }
    }

    /// One stochastic pass through every factor.
    pub(crate) fn pass(&self, fwd: &mut Forward<'_, F>, x: &Array2<F>, noise: &ElboNoise<F>) -> Result<Pass> {
        self.check_batch(x)?;
        let batch = x.nrows();
        self.check_noise(batch, noise)?;
        let k = self.config.class_rows();
        let xv = fwd.constant(x.clone());

        let (q_z1, z1) = self.encode_z1(fwd, xv, &noise.z1)?;
        let log_qz1 = fwd.graph.gaussian_log_prob(z1, q_z1.0, q_z1.1);
        let log_w = self.class_log_weights(fwd, xv, z1)?;
        let (q_z2, z2) = self.encode_z2(fwd, xv, z1, &noise.z2)?;
        let log_qz2 = fwd.graph.gaussian_log_prob(z2, q_z2.0, q_z2.1);
        let zeros = fwd.constant(Array2::zeros((batch * k, self.config.z2_dim)));
        let log_pz2 = fwd.graph.gaussian_log_prob(z2, zeros, zeros);

        let log_py = match self.prior_class_log_probs(fwd, z2)? {
            Some(table) => pick(fwd, table, (0..batch * k).map(|r| r % k).collect()),
            None => fwd.constant(Array2::zeros((batch, 1))),
        };

        let (p_z1, log_pz1, logits) = match self.config.variant {
            Variant::Vae => {
                let p_z1 = self.heads.p_z1.forward(fwd, &[Input::Dense(z2)])?;
                let log_pz1 = fwd.graph.gaussian_log_prob(z1, p_z1.0, p_z1.1);
                let logits = self.heads.p_x.logits(fwd, &[Input::Dense(z1)])?;
                (p_z1, log_pz1, logits)
            }
            Variant::Cagem => {
                let p_z1 = self
                    .heads
                    .p_z1
                    .forward(fwd, &[Input::ClassCycle, Input::Dense(z2)])?;
                let z1_rows = fwd.graph.repeat_rows(z1, k);
                let log_pz1 = fwd.graph.gaussian_log_prob(z1_rows, p_z1.0, p_z1.1);
                let logits = self
                    .heads
                    .p_x
                    .logits(fwd, &[Input::ClassCycle, Input::Tiled(z1)])?;
                (p_z1, log_pz1, logits)
            }
        };
        let target = if k == 1 {
            x.clone()
        } else {
            Array2::from_shape_fn((batch * k, x.ncols()), |(r, c)| x[[r / k, c]])
        };
        let log_px = fwd
            .graph
            .bernoulli_log_prob(logits, target, F::lit(bernoulli_logit_bound()));

        let pass = Pass {
            batch,
            k,
            q_z1,
            log_qz1,
            log_w,
            q_z2,
            log_qz2,
            log_pz2,
            log_py,
            p_z1,
            log_pz1,
            log_px,
        };
        pass.check_finite(fwd)?;
        Ok(pass)
    }

    /// Combines a pass into `log_px + tau * latent` per example.
    pub(crate) fn elbo_vars(&self, fwd: &mut Forward<'_, F>, p: &Pass, tau: F) -> ElboVars {
        let g = &mut fwd.graph;
        let log_w_rows = g.reshape(p.log_w, p.batch * p.k, 1);
        let w_rows = g.exp(log_w_rows);
        let log_qz1_rows = g.repeat_rows(p.log_qz1, p.k);

        let mut latent = g.add(p.log_pz1, p.log_py);
        latent = g.add(latent, p.log_pz2);
        latent = g.sub(latent, log_w_rows);
        latent = g.sub(latent, log_qz1_rows);
        latent = g.sub(latent, p.log_qz2);

        let weighted_px = g.mul(w_rows, p.log_px);
        let weighted_latent = g.mul(w_rows, latent);
        let log_px = per_example_sum(g, weighted_px, p.batch, p.k);
        let latent = per_example_sum(g, weighted_latent, p.batch, p.k);
        let scaled = g.scale(latent, tau);
        let elbo = g.add(log_px, scaled);
        ElboVars { log_px, latent, elbo }
    }

    /// Single-sample ELBO with frozen batch-norm statistics.
    pub fn elbo(&self, x: &Array2<F>, noise: &ElboNoise<F>, tau: f64) -> Result<ElboTerms> {
        let mut fwd = Forward::new(&self.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
        self.elbo_in(&mut fwd, x, noise, tau)
    }

    /// Single-sample ELBO in either batch-norm mode; `TrainCollect` folds the
    /// batch statistics into the running averages.
    pub fn elbo_with_mode(
        &mut self,
        x: &Array2<F>,
        noise: &ElboNoise<F>,
        tau: f64,
        mode: BatchNormMode,
    ) -> Result<ElboTerms> {
        let (terms, updates) = {
            let mut fwd = Forward::new(&self.store, mode, GroupSet::NONE);
            let terms = self.elbo_in(&mut fwd, x, noise, tau)?;
            (terms, fwd.into_parts().1)
        };
        apply_batch_norm_updates(&mut self.store, &updates);
        Ok(terms)
    }

    fn elbo_in(&self, fwd: &mut Forward<'_, F>, x: &Array2<F>, noise: &ElboNoise<F>, tau: f64) -> Result<ElboTerms> {
        check_tau(tau)?;
        let p = self.pass(fwd, x, noise)?;
        let v = self.elbo_vars(fwd, &p, F::lit(tau));
        let col = |var: Var| fwd.value(var).column(0).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        Ok(ElboTerms {
            log_px: col(v.log_px),
            latent_term: col(v.latent),
            elbo: col(v.elbo),
            class_weights: fwd.value(p.log_w).mapv(|v| v.as_f64().exp()),
        })
    }

    /// `vae_elbo` with a variant check.
    pub fn vae_elbo(&self, x: &Array2<F>, noise: &ElboNoise<F>, tau: f64) -> Result<ElboTerms> {
        if self.variant() != Variant::Vae {
            return Err(Error::Config("vae_elbo called on a cluster-aware model".into()));
        }
        self.elbo(x, noise, tau)
    }

    pub fn cagem_elbo(&self, x: &Array2<F>, noise: &ElboNoise<F>, tau: f64) -> Result<ElboTerms> {
        if self.variant() != Variant::Cagem {
            return Err(Error::Config("cagem_elbo called on a VAE".into()));
        }
        self.elbo(x, noise, tau)
    }

    /// Log importance weights `log p(x, z1, z2) / q(z1, z2 | x)` with `y`
    /// summed out exactly:
    /// `log w = LSE_c[log p(x|c,z1) + log p(z1|c,z2^c) + log p(c|z2^c) + log p(z2^c) - log q(z2^c|x,c,z1)] - log q(z1|x)`.
    pub fn log_weights(&self, x: &Array2<F>, noise: &ElboNoise<F>) -> Result<Vec<f64>> {
        let mut fwd = Forward::new(&self.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
        let p = self.pass(&mut fwd, x, noise)?;
        let v = |var: Var| fwd.value(var).column(0).to_owned();
        let (px, pz1, py, pz2, qz2, qz1) = (
            v(p.log_px),
            v(p.log_pz1),
            v(p.log_py),
            v(p.log_pz2),
            v(p.log_qz2),
            v(p.log_qz1),
        );
        let mut out = Vec::with_capacity(p.batch);
        let mut buf = vec![0.0; p.k];
        for b in 0..p.batch {
            for (c, slot) in buf.iter_mut().enumerate() {
                let r = b * p.k + c;
                *slot = px[r].as_f64() + pz1[r].as_f64() + py[r].as_f64() + pz2[r].as_f64()
                    - qz2[r].as_f64();
            }
            let w = crate::scalar::log_sum_exp(&buf) - qz1[b].as_f64();
            if !w.is_finite() {
                return Err(Error::NonFinite {
                    term: "importance weight".into(),
                });
            }
            out.push(w);
        }
        Ok(out)
    }

    /// Ancestral sampling. `class` fixes `y`; otherwise `y ~ p(y | z2)`.
    pub fn generate(&self, n: usize, class: Option<usize>, rng: &mut impl Rng) -> Result<Generated<F>> {
        let k = self.config.class_rows();
        if let Some(c) = class {
            if self.variant() == Variant::Vae {
                return Err(Error::Config("the VAE has no class variable".into()));
            }
            if c >= k {
                return Err(Error::IndexOutOfRange { index: c, len: k });
            }
        }
        if n == 0 {
            return Ok(Generated {
                means: Array2::zeros((0, self.config.x_dim)),
                samples: Array2::zeros((0, self.config.x_dim)),
                y: Vec::new(),
                z1: Array2::zeros((0, self.config.z1_dim)),
                z2: Array2::zeros((0, self.config.z2_dim)),
            });
        }
        let mut fwd = Forward::new(&self.store, BatchNormMode::EvalFrozen, GroupSet::NONE);
        let z2 = fwd.constant(standard_normal(n, self.config.z2_dim, rng));
        let y: Vec<usize> = match (self.prior_class_log_probs(&mut fwd, z2)?, class) {
            (_, Some(c)) => vec![c; n],
            (Some(table), None) => {
                let probs = fwd.value(table).mapv(|v| v.as_f64().exp());
                probs
                    .rows()
                    .into_iter()
                    .map(|row| sample_categorical(row.as_slice().expect("contiguous"), rng))
                    .collect()
            }
            (None, None) => vec![0; n],
        };
        let (m, ls) = match self.variant() {
            Variant::Vae => self.heads.p_z1.forward(&mut fwd, &[Input::Dense(z2)])?,
            Variant::Cagem => self
                .heads
                .p_z1
                .forward(&mut fwd, &[Input::Labels(&y), Input::Dense(z2)])?,
        };
        let z1 = fwd
            .graph
            .reparam(m, ls, standard_normal(n, self.config.z1_dim, rng));
        let logits = match self.variant() {
            Variant::Vae => self.heads.p_x.logits(&mut fwd, &[Input::Dense(z1)])?,
            Variant::Cagem => self
                .heads
                .p_x
                .logits(&mut fwd, &[Input::Labels(&y), Input::Dense(z1)])?,
        };
        let means = fwd.value(logits).mapv(logistic);
        let samples = means.mapv(|p| {
            if rng.random::<f64>() < p.as_f64() {
                F::one()
            } else {
                F::zero()
            }
        });
        Ok(Generated {
            means,
            samples,
            y: if self.variant() == Variant::Vae { Vec::new() } else { y },
            z1: fwd.value(z1).clone(),
            z2: fwd.value(z2).clone(),
        })
    }
}

/// Output of [`Model::generate`].
#[derive(Debug, Clone)]
pub struct Generated<F> {
    /// Bernoulli means, `n x x_dim`.
    pub means: Array2<F>,
    /// One binary draw from each mean.
    pub samples: Array2<F>,
    /// Sampled or fixed classes; empty for the VAE.
    pub y: Vec<usize>,
    pub z1: Array2<F>,
    pub z2: Array2<F>,
}

impl Pass {
    fn check_finite<F: Real>(&self, fwd: &Forward<'_, F>) -> Result<()> {
        let terms = [
            (self.log_qz1, "log q(z1|x)"),
            (self.log_w, "log q(y|z1,x)"),
            (self.log_qz2, "log q(z2|x,y,z1)"),
            (self.log_pz2, "log p(z2)"),
            (self.log_py, "log p(y|z2)"),
            (self.log_pz1, "log p(z1|y,z2)"),
            (self.log_px, "log p(x|y,z1)"),
        ];
        for (v, name) in terms {
            if fwd.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("temperature {tau} outside [0, 1]")));
    }
    Ok(())
}

/// Row `r` of the result is `table[r, cols[r]]`, as an `N x 1` column.
pub(crate) fn pick<F: Real>(fwd: &mut Forward<'_, F>, table: Var, cols: Vec<usize>) -> Var {
    let (rows, k) = fwd.value(table).dim();
    debug_assert_eq!(rows, cols.len());
    let mut mask = Array2::zeros((rows, k));
    for (r, c) in cols.into_iter().enumerate() {
        mask[[r, c]] = F::one();
    }
    let mask = fwd.constant(mask);
    let masked = fwd.graph.mul(table, mask);
    fwd.graph.sum_cols(masked)
}

/// Sums the `k` class rows of each example: `(batch * k) x 1 -> batch x 1`.
pub(crate) fn per_example_sum<F: Real>(
    g: &mut crate::autodiff::Graph<F>,
    rows: Var,
    batch: usize,
    k: usize,
) -> Var {
    if k == 1 {
        return rows;
    }
    let table = g.reshape(rows, batch, k);
    g.sum_cols(table)
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += *p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Replicates each row of `x` `times` times (row `b * times + j` is `x[b]`).
pub fn repeat_rows<F: Real>(x: &Array2<F>, times: usize) -> Array2<F> {
    if times == 1 {
        return x.clone();
    }
    let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
    for (b, row) in x.axis_iter(Axis(0)).enumerate() {
        for j in 0..times {
            out.row_mut(b * times + j).assign(&row);
        }
    }
    out
}
