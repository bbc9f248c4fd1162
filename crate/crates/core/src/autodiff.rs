//! A small reverse-mode tape over dense matrices.
//!
//! Every value is a 2-d array; scalars are `1 x 1`. Nodes whose inputs are all
//! constants do not require a gradient and are skipped during the backward
//! sweep, so parameters inserted as constants receive no gradient at all.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis, Zip};

use crate::params::ParamId;
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Exp(Var),
    Clamp(Var, F, F),
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumCols(Var),
    Sum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Array1<F>,
        batch_stats: bool,
    },
    Reparam {
        mean: Var,
        log_std: Var,
        noise: Array2<F>,
    },
    GaussianLogProb {
        x: Var,
        mean: Var,
        log_std: Var,
    },
    LogSoftmaxFloor {
        logits: Var,
        eta: F,
    },
    BernoulliLogProb {
        logits: Var,
        target: Array2<F>,
        bound: F,
    },
    LogSumExpRows(Var),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the parameters that took part.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    map: BTreeMap<ParamId, Array2<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Array2<F>) {
        self.map.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients<F>, scale: F) {
        for (id, g) in other.iter() {
            match self.map.get_mut(&id) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.map.insert(id, g.mapv(|v| v * scale));
                }
            }
        }
    }

    pub fn scale(&mut self, scale: F) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    fn accumulate(&mut self, id: ParamId, g: Array2<F>) {
        match self.map.get_mut(&id) {
            Some(acc) => *acc += &g,
            None => {
                self.map.insert(id, g);
            }
        }
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_rows<F: Real>(a: &Array2<F>) -> Array2<F> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Column `N x 1` node as a vector.
    pub fn column(&self, v: Var) -> Array1<F> {
        self.nodes[v.0].value.column(0).to_owned()
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a parameter; `trainable == false` makes it an ordinary constant.
    pub fn param(&mut self, id: ParamId, value: Array2<F>, trainable: bool) -> Var {
        if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    /// Copies the value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a + bias`, with `bias` a `1 x n` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1, "bias must be a single row");
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| if v < F::zero() { F::zero() } else { v });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(F::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let value = self.value(a).mapv(|v| clamp_nan(v, lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Repeats every row `k` times in place: row `r * k + j` is row `r`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        let (n, m) = src.dim();
        let value = Array2::from_shape_fn((n * k, m), |(r, c)| src[[r / k, c]]);
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a, k), rg)
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size");
        let value = src
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("contiguous reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Row sums as an `N x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// (biased) batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, Array1<F>, Array1<F>) {
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let value = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        (out, mean, var)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<F>,
        running_var: &Array1<F>,
        eps: F,
    ) -> Var {
        let inv_std = running_var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = (self.value(x) - running_mean) * &inv_std;
        let value = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        )
    }

    /// `mean + exp(log_std) * noise`.
    pub fn reparam(&mut self, mean: Var, log_std: Var, noise: Array2<F>) -> Var {
        assert_eq!(self.value(mean).dim(), noise.dim(), "noise shape");
        let mut value = self.value(log_std).mapv(F::exp);
        value *= &noise;
        value += self.value(mean);
        let rg = self.rg(mean) || self.rg(log_std);
        self.push(
            value,
            Op::Reparam {
                mean,
                log_std,
                noise,
            },
            rg,
        )
    }

    /// Row-wise diagonal Gaussian log-density, `N x 1`.
    pub fn gaussian_log_prob(&mut self, x: Var, mean: Var, log_std: Var) -> Var {
        let half_log_2pi = F::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = F::lit(0.5);
        let xv = self.value(x);
        assert_eq!(xv.dim(), self.value(mean).dim(), "gaussian mean shape");
        assert_eq!(xv.dim(), self.value(log_std).dim(), "gaussian log_std shape");
        let mut elem = Array2::zeros(xv.dim());
        Zip::from(&mut elem)
            .and(xv)
            .and(self.value(mean))
            .and(self.value(log_std))
            .for_each(|e, &x, &m, &ls| {
                let u = (x - m) * (-ls).exp();
                *e = -half_log_2pi - ls - half * u * u;
            });
        let value = elem.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x) || self.rg(mean) || self.rg(log_std);
        self.push(value, Op::GaussianLogProb { x, mean, log_std }, rg)
    }

    /// `log((1 - eta) * softmax(logits) + eta / K)` row-wise: a log-probability
    /// table whose rows still sum to one in probability space but never reach
    /// `-inf`.
    pub fn log_softmax_floor(&mut self, logits: Var, eta: F) -> Var {
        let a = self.value(logits);
        let k = a.ncols();
        let value = if k == 1 {
            Array2::zeros(a.dim())
        } else {
            let floor = eta / F::from_usize(k).expect("class count");
            softmax_rows(a).mapv(|p| ((F::one() - eta) * p + floor).ln())
        };
        let rg = self.rg(logits);
        self.push(value, Op::LogSoftmaxFloor { logits, eta }, rg)
    }

    /// Row-wise Bernoulli log-likelihood of a constant binary `target` under
    /// `sigmoid(logits)`, with logits clamped to `[-bound, bound]`.
    pub fn bernoulli_log_prob(&mut self, logits: Var, target: Array2<F>, bound: F) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), target.dim(), "bernoulli target shape");
        let mut elem = Array2::zeros(lv.dim());
        Zip::from(&mut elem)
            .and(lv)
            .and(&target)
            .for_each(|e, &l, &t| {
                let l = clamp_nan(l, -bound, bound);
                *e = t * l - softplus(l);
            });
        let value = elem.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(logits);
        self.push(
            value,
            Op::BernoulliLogProb {
                logits,
                target,
                bound,
            },
            rg,
        )
    }

    /// `log(sum_j exp(a_ij))` as an `N x 1` column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array2::from_shape_fn((av.nrows(), 1), |(r, _)| {
            let row = av.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if !max.is_finite() {
                return max;
            }
            max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
        });
        let rg = self.rg(a);
        self.push(value, Op::LogSumExpRows(a), rg)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut out = Gradients::new();
        if !self.rg(root) {
            return out;
        }
        let mut grads: Vec<Option<Array2<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.rg(*b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g * &node.value;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = F::zero();
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::RepeatRows(a, k) => {
                    let (n, m) = self.value(*a).dim();
                    let ga = g
                        .into_shape_with_order((n, *k, m))
                        .expect("repeat grad shape")
                        .sum_axis(Axis(1));
                    self.acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let ga = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(dim)
                        .expect("reshape grad");
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let dim = self.value(*a).dim();
                    let ga = g
                        .broadcast(dim)
                        .expect("sum_cols grad broadcast")
                        .to_owned();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *beta, gb);
                    }
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *gamma, gg);
                    }
                    if self.rg(*x) {
                        let dxhat = &g * &self.value(*gamma).row(0);
                        let gx = if *batch_stats {
                            let n = F::from_usize(dxhat.nrows()).expect("rows");
                            let sum_d = dxhat.sum_axis(Axis(0));
                            let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                            let mut gx = dxhat.mapv(|v| v * n);
                            gx -= &sum_d;
                            gx -= &(xhat * &sum_dx);
                            gx * &inv_std.mapv(|s| s / n)
                        } else {
                            dxhat * inv_std
                        };
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Reparam {
                    mean,
                    log_std,
                    noise,
                } => {
                    if self.rg(*log_std) {
                        let mut gl = self.value(*log_std).mapv(F::exp);
                        gl *= noise;
                        gl *= &g;
                        self.acc(&mut grads, *log_std, gl);
                    }
                    if self.rg(*mean) {
                        self.acc(&mut grads, *mean, g);
                    }
                }
                Op::GaussianLogProb { x, mean, log_std } => {
                    let xv = self.value(*x);
                    let dim = xv.dim();
                    // d/dx = -u/sigma, d/dmean = u/sigma, d/dlog_std = u^2 - 1
                    let mut u_over_s = Array2::zeros(dim);
                    let mut dls = Array2::zeros(dim);
                    Zip::from(&mut u_over_s)
                        .and(&mut dls)
                        .and(xv)
                        .and(self.value(*mean))
                        .and(self.value(*log_std))
                        .and_broadcast(&g)
                        .for_each(|us, dl, &x, &m, &ls, &gr| {
                            let inv_s = (-ls).exp();
                            let u = (x - m) * inv_s;
                            *us = gr * u * inv_s;
                            *dl = gr * (u * u - F::one());
                        });
                    if self.rg(*log_std) {
                        self.acc(&mut grads, *log_std, dls);
                    }
                    if self.rg(*x) {
                        self.acc(&mut grads, *x, u_over_s.mapv(|v| -v));
                    }
                    if self.rg(*mean) {
                        self.acc(&mut grads, *mean, u_over_s);
                    }
                }
                Op::LogSoftmaxFloor { logits, eta } => {
                    let a = self.value(*logits);
                    if a.ncols() > 1 {
                        let p = softmax_rows(a);
                        let keep = F::one() - *eta;
                        // r_j = g_j (1 - eta) p_j / q_j ; d_i = r_i - p_i sum_j r_j
                        let mut r = Array2::zeros(a.dim());
                        Zip::from(&mut r)
                            .and(&g)
                            .and(&p)
                            .and(&node.value)
                            .for_each(|r, &gr, &p, &lq| *r = gr * keep * p / lq.exp());
                        let rsum = r.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ga = r - &(&p * &rsum);
                        self.acc(&mut grads, *logits, ga);
                    }
                }
                Op::BernoulliLogProb {
                    logits,
                    target,
                    bound,
                } => {
                    let lv = self.value(*logits);
                    let mut ga = Array2::zeros(lv.dim());
                    Zip::from(&mut ga)
                        .and(lv)
                        .and(target)
                        .and_broadcast(&g)
                        .for_each(|d, &l, &t, &gr| {
                            if l >= -*bound && l <= *bound {
                                *d = gr * (t - sigmoid(l));
                            }
                        });
                    self.acc(&mut grads, *logits, ga);
                }
                Op::LogSumExpRows(a) => {
                    let ga = softmax_rows(self.value(*a)) * &g;
                    self.acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Logistic function shared with the heads and samplers.
/// Like `max(lo).min(hi)` but NaN stays NaN.
fn clamp_nan<F: Real>(v: F, lo: F, hi: F) -> F {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

pub fn logistic<F: Real>(x: F) -> F {
    sigmoid(x)
}
