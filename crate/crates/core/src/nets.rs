//! Feed-forward trunks and distribution heads.
//!
//! Every hidden layer is `affine -> batch-norm -> ReLU`. Conditioning on
//! several inputs is concatenation along the feature axis; the first layer
//! keeps one weight block per input so that inputs shared across the `K`
//! class branches (e.g. `x` and `z1` in `q(z2 | x, y, z1)`) are multiplied
//! once and then tiled, and the class one-hot contributes a gathered row of
//! its weight block.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::distributions::{LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::params::{BufferId, GroupSet, ParamGroup, ParamId, ParamStore};
use crate::scalar::Real;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and report them for the running averages.
    TrainCollect,
    /// Normalize with batch statistics without touching the running averages.
    TrainBatch,
    /// Normalize with the stored running statistics; never mutates them.
    EvalFrozen,
}

/// Declared input of a first layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    Features { name: String, width: usize },
    /// One-hot class indicator of width `classes`.
    Class { classes: usize },
}

impl Block {
    pub fn features(name: &str, width: usize) -> Self {
        Block::Features {
            name: name.to_string(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Block::Features { width, .. } => *width,
            Block::Class { classes } => *classes,
        }
    }
}

/// Runtime value bound to a [`Block`].
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    /// One row per output row.
    Dense(Var),
    /// One row per example, repeated for each of the `K` class rows.
    Tiled(Var),
    /// One-hot of `row % K` (class-stacked layout, row `b * K + c`).
    ClassCycle,
    /// One-hot of an explicit label per output row.
    Labels(&'a [usize]),
}

/// Pending running-statistics update produced by a `TrainCollect` forward.
#[derive(Debug, Clone)]
pub struct BatchNormUpdate<F> {
    mean: BufferId,
    var: BufferId,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
}

/// Folds collected batch statistics into the running averages.
pub fn apply_batch_norm_updates<F: Real>(store: &mut ParamStore<F>, updates: &[BatchNormUpdate<F>]) {
    let m = F::lit(BN_MOMENTUM);
    let one_m = F::one() - m;
    for u in updates {
        store
            .buffer_mut(u.mean)
            .zip_mut_with(&u.batch_mean, |r, &b| *r = m * *r + one_m * b);
        store
            .buffer_mut(u.var)
            .zip_mut_with(&u.batch_var, |r, &b| *r = m * *r + one_m * b);
    }
}

/// A forward pass under construction: graph, mode, and which parameter groups
/// are differentiable.
pub struct Forward<'s, F: Real> {
    pub graph: Graph<F>,
    store: &'s ParamStore<F>,
    mode: BatchNormMode,
    trainable: GroupSet,
    leaves: HashMap<ParamId, Var>,
    updates: Vec<BatchNormUpdate<F>>,
}

impl<'s, F: Real> Forward<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: BatchNormMode, trainable: GroupSet) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            trainable,
            leaves: HashMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> BatchNormMode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&id) {
            return *v;
        }
        let trainable = self.trainable.contains(self.store.group(id));
        let v = self.graph.param(id, self.store.value(id).clone(), trainable);
        self.leaves.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        self.graph.value(v)
    }

    pub fn into_parts(self) -> (Graph<F>, Vec<BatchNormUpdate<F>>) {
        (self.graph, self.updates)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

#[derive(Debug, Clone)]
struct FirstLayer {
    blocks: Vec<(Block, ParamId)>,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    fn forward<F: Real>(&self, fwd: &mut Forward<'_, F>, x: Var) -> Var {
        let w = fwd.param(self.weight);
        let b = fwd.param(self.bias);
        let h = fwd.graph.matmul(x, w);
        fwd.graph.add_bias(h, b)
    }
}

/// Stack of `affine -> batch-norm -> ReLU` layers.
#[derive(Debug, Clone)]
pub struct DenseStack {
    name: String,
    first: FirstLayer,
    rest: Vec<Affine>,
    norms: Vec<Option<Norm>>,
    widths: Vec<usize>,
    classes: Option<usize>,
}

impl DenseStack {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Width of the concatenated input.
    pub fn input_width(&self) -> usize {
        self.first.blocks.iter().map(|(b, _)| b.width()).sum()
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.first.blocks.iter().map(|(b, _)| b)
    }

    fn first_layer<F: Real>(&self, fwd: &mut Forward<'_, F>, inputs: &[Input<'_>]) -> Result<Var> {
        if inputs.len() != self.first.blocks.len() {
            return Err(Error::dim(
                format!("{} input blocks", self.name),
                self.first.blocks.len(),
                inputs.len(),
            ));
        }
        let k = self.classes.unwrap_or(1);
        // Output row count implied by each input.
        let mut rows: Option<usize> = None;
        for (input, (block, _)) in inputs.iter().zip(&self.first.blocks) {
            let r = match (input, block) {
                (Input::Dense(v), Block::Features { width, name }) => {
                    check_width(fwd, *v, *width, &self.name, name)?;
                    Some(fwd.value(*v).nrows())
                }
                (Input::Tiled(v), Block::Features { width, name }) => {
                    if self.classes.is_none() {
                        return Err(Error::Config(format!(
                            "{}: tiled input needs a class block",
                            self.name
                        )));
                    }
                    check_width(fwd, *v, *width, &self.name, name)?;
                    Some(fwd.value(*v).nrows() * k)
                }
                (Input::ClassCycle, Block::Class { .. }) => None,
                (Input::Labels(l), Block::Class { classes }) => {
                    if let Some(&bad) = l.iter().find(|&&c| c >= *classes) {
                        return Err(Error::IndexOutOfRange {
                            index: bad,
                            len: *classes,
                        });
                    }
                    Some(l.len())
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{}: input kind does not match declared block {block:?}",
                        self.name
                    )))
                }
            };
            if let Some(r) = r {
                match rows {
                    None => rows = Some(r),
                    Some(prev) if prev != r => {
                        return Err(Error::dim(format!("{} input rows", self.name), prev, r))
                    }
                    _ => {}
                }
            }
        }
        let rows = rows.ok_or_else(|| {
            Error::Config(format!("{}: cannot infer batch size from inputs", self.name))
        })?;

        let mut tiled_acc: Option<Var> = None;
        let mut acc: Option<Var> = None;
        for (input, (_, wid)) in inputs.iter().zip(&self.first.blocks) {
            let w = fwd.param(*wid);
            let term = match input {
                Input::Dense(v) => fwd.graph.matmul(*v, w),
                Input::Tiled(v) => {
                    let t = fwd.graph.matmul(*v, w);
                    tiled_acc = Some(match tiled_acc {
                        Some(a) => fwd.graph.add(a, t),
                        None => t,
                    });
                    continue;
                }
                Input::ClassCycle => fwd.graph.gather_rows(w, (0..rows).map(|r| r % k).collect()),
                Input::Labels(l) => fwd.graph.gather_rows(w, l.to_vec()),
            };
            acc = Some(match acc {
                Some(a) => fwd.graph.add(a, term),
                None => term,
            });
        }
        if let Some(t) = tiled_acc {
            let t = fwd.graph.repeat_rows(t, k);
            acc = Some(match acc {
                Some(a) => fwd.graph.add(a, t),
                None => t,
            });
        }
        let b = fwd.param(self.first.bias);
        Ok(fwd.graph.add_bias(acc.expect("at least one block"), b))
    }

    fn normalize<F: Real>(&self, fwd: &mut Forward<'_, F>, layer: usize, h: Var) -> Result<Var> {
        let Some(norm) = &self.norms[layer] else {
            return Ok(h);
        };
        let gamma = fwd.param(norm.gamma);
        let beta = fwd.param(norm.beta);
        let eps = F::lit(BN_EPS);
        match fwd.mode {
            BatchNormMode::TrainCollect | BatchNormMode::TrainBatch => {
                if fwd.value(h).nrows() < 2 {
                    return Err(Error::DegenerateBatch {
                        context: format!("{} layer {layer}", self.name),
                    });
                }
                let (out, mean, var) = fwd.graph.batch_norm_train(h, gamma, beta, eps);
                if fwd.mode == BatchNormMode::TrainCollect {
                    fwd.updates.push(BatchNormUpdate {
                        mean: norm.running_mean,
                        var: norm.running_var,
                        batch_mean: mean,
                        batch_var: var,
                    });
                }
                Ok(out)
            }
            BatchNormMode::EvalFrozen => {
                let store = fwd.store;
                Ok(fwd.graph.batch_norm_eval(
                    h,
                    gamma,
                    beta,
                    store.buffer(norm.running_mean),
                    store.buffer(norm.running_var),
                    eps,
                ))
            }
        }
    }

    /// Forward through every layer.
    pub fn forward<F: Real>(&self, fwd: &mut Forward<'_, F>, inputs: &[Input<'_>]) -> Result<Var> {
        let mut h = self.first_layer(fwd, inputs)?;
        h = self.normalize(fwd, 0, h)?;
        h = fwd.graph.relu(h);
        for (i, layer) in self.rest.iter().enumerate() {
            h = layer.forward(fwd, h);
            h = self.normalize(fwd, i + 1, h)?;
            h = fwd.graph.relu(h);
        }
        Ok(h)
    }
}

fn check_width<F: Real>(
    fwd: &Forward<'_, F>,
    v: Var,
    width: usize,
    net: &str,
    block: &str,
) -> Result<()> {
    let found = fwd.value(v).ncols();
    if found != width {
        return Err(Error::dim(format!("{net} block {block}"), width, found));
    }
    Ok(())
}

/// `d = NN(inputs)`, `mean = Linear(d)`, `log_std = Linear(d)`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub trunk: DenseStack,
    mean: Affine,
    log_std: Affine,
    dim: usize,
}

impl GaussianHead {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Returns `(mean, log_std)`, with `log_std` clamped.
    pub fn forward<F: Real>(
        &self,
        fwd: &mut Forward<'_, F>,
        inputs: &[Input<'_>],
    ) -> Result<(Var, Var)> {
        let d = self.trunk.forward(fwd, inputs)?;
        let mean = self.mean.forward(fwd, d);
        let ls = self.log_std.forward(fwd, d);
        let ls = fwd
            .graph
            .clamp(ls, F::lit(LOG_STD_MIN), F::lit(LOG_STD_MAX));
        Ok((mean, ls))
    }
}

/// Trunk followed by a linear map to logits; the sigmoid is applied by the
/// log-likelihood or by [`crate::autodiff::logistic`].
#[derive(Debug, Clone)]
pub struct BernoulliHead {
    pub trunk: DenseStack,
    out: Affine,
    dim: usize,
}

impl BernoulliHead {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logits<F: Real>(&self, fwd: &mut Forward<'_, F>, inputs: &[Input<'_>]) -> Result<Var> {
        let d = self.trunk.forward(fwd, inputs)?;
        Ok(self.out.forward(fwd, d))
    }
}

/// Trunk followed by a softmax over `classes` (floored log-probabilities).
#[derive(Debug, Clone)]
pub struct CategoricalHead {
    pub trunk: DenseStack,
    out: Affine,
    classes: usize,
}

impl CategoricalHead {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn log_probs<F: Real>(
        &self,
        fwd: &mut Forward<'_, F>,
        inputs: &[Input<'_>],
    ) -> Result<Var> {
        let d = self.trunk.forward(fwd, inputs)?;
        let logits = self.out.forward(fwd, d);
        Ok(fwd
            .graph
            .log_softmax_floor(logits, F::lit(crate::distributions::CATEGORICAL_FLOOR)))
    }
}

/// Allocates head parameters with Glorot-uniform weights and zero biases.
pub struct NetBuilder<'a, F> {
    pub store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    batch_norm: bool,
}

impl<'a, F: Real> NetBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng, batch_norm: bool) -> Self {
        Self {
            store,
            rng,
            batch_norm,
        }
    }

    fn glorot(&mut self, fan_in: usize, rows: usize, cols: usize, fan_out: usize) -> Array2<F> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || {
            F::lit(self.rng.random_range(-limit..limit))
        })
    }

    fn affine(&mut self, name: &str, inp: usize, out: usize, group: ParamGroup) -> Result<Affine> {
        let w = self.glorot(inp, inp, out, out);
        let weight = self.store.add_param(format!("{name}.w"), w, group)?;
        let bias = self
            .store
            .add_param(format!("{name}.b"), Array2::zeros((1, out)), group)?;
        Ok(Affine { weight, bias })
    }

    /// Zero weights and bias: the head starts at unit scale for every input.
    fn zero_affine(&mut self, name: &str, inp: usize, out: usize, group: ParamGroup) -> Result<Affine> {
        let weight = self.store.add_param(format!("{name}.w"), Array2::zeros((inp, out)), group)?;
        let bias = self
            .store
            .add_param(format!("{name}.b"), Array2::zeros((1, out)), group)?;
        Ok(Affine { weight, bias })
    }

    fn norm(&mut self, name: &str, width: usize, group: ParamGroup) -> Result<Option<Norm>> {
        if !self.batch_norm {
            return Ok(None);
        }
        Ok(Some(Norm {
            gamma: self
                .store
                .add_param(format!("{name}.bn_gamma"), Array2::ones((1, width)), group)?,
            beta: self
                .store
                .add_param(format!("{name}.bn_beta"), Array2::zeros((1, width)), group)?,
            running_mean: self
                .store
                .add_buffer(format!("{name}.bn_mean"), Array1::zeros(width))?,
            running_var: self
                .store
                .add_buffer(format!("{name}.bn_var"), Array1::ones(width))?,
        }))
    }

    pub fn dense_stack(
        &mut self,
        name: &str,
        blocks: Vec<Block>,
        widths: &[usize],
        group: ParamGroup,
    ) -> Result<DenseStack> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("{name}: hidden widths must be non-empty and positive")));
        }
        if blocks.is_empty() {
            return Err(Error::Config(format!("{name}: no input blocks")));
        }
        let classes = blocks.iter().find_map(|b| match b {
            Block::Class { classes } => Some(*classes),
            _ => None,
        });
        let fan_in: usize = blocks.iter().map(Block::width).sum();
        let mut first_blocks = Vec::with_capacity(blocks.len());
        for block in blocks {
            let label = match &block {
                Block::Features { name, .. } => name.clone(),
                Block::Class { .. } => "y".to_string(),
            };
            let w = self.glorot(fan_in, block.width(), widths[0], widths[0]);
            let id = self.store.add_param(format!("{name}.l0.w_{label}"), w, group)?;
            first_blocks.push((block, id));
        }
        let bias = self
            .store
            .add_param(format!("{name}.l0.b"), Array2::zeros((1, widths[0])), group)?;
        let mut norms = vec![self.norm(&format!("{name}.l0"), widths[0], group)?];
        let mut rest = Vec::new();
        for i in 1..widths.len() {
            rest.push(self.affine(&format!("{name}.l{i}"), widths[i - 1], widths[i], group)?);
            norms.push(self.norm(&format!("{name}.l{i}"), widths[i], group)?);
        }
        Ok(DenseStack {
            name: name.to_string(),
            first: FirstLayer {
                blocks: first_blocks,
                bias,
            },
            rest,
            norms,
            widths: widths.to_vec(),
            classes,
        })
    }

    pub fn gaussian_head(
        &mut self,
        name: &str,
        blocks: Vec<Block>,
        widths: &[usize],
        dim: usize,
        group: ParamGroup,
    ) -> Result<GaussianHead> {
        let trunk = self.dense_stack(name, blocks, widths, group)?;
        let h = trunk.output_width();
        Ok(GaussianHead {
            mean: self.affine(&format!("{name}.mean"), h, dim, group)?,
            log_std: self.zero_affine(&format!("{name}.log_std"), h, dim, group)?,
            trunk,
            dim,
        })
    }

    pub fn bernoulli_head(
        &mut self,
        name: &str,
        blocks: Vec<Block>,
        widths: &[usize],
        dim: usize,
        group: ParamGroup,
    ) -> Result<BernoulliHead> {
        let trunk = self.dense_stack(name, blocks, widths, group)?;
        let h = trunk.output_width();
        Ok(BernoulliHead {
            out: self.affine(&format!("{name}.out"), h, dim, group)?,
            trunk,
            dim,
        })
    }

    pub fn categorical_head(
        &mut self,
        name: &str,
        blocks: Vec<Block>,
        widths: &[usize],
        classes: usize,
        group: ParamGroup,
    ) -> Result<CategoricalHead> {
        let trunk = self.dense_stack(name, blocks, widths, group)?;
        let h = trunk.output_width();
        Ok(CategoricalHead {
            out: self.affine(&format!("{name}.out"), h, classes, group)?,
            trunk,
            classes,
        })
    }
}

/// Runs a trunk on a plain matrix. In `TrainCollect` mode the running
/// statistics in `store` are updated.
pub fn dense_forward<F: Real>(
    net: &DenseStack,
    store: &mut ParamStore<F>,
    input: &Array2<F>,
    mode: BatchNormMode,
) -> Result<Array2<F>> {
    if net.first.blocks.len() != 1 {
        return Err(Error::Config(format!(
            "{}: dense_forward needs a single-block net",
            net.name
        )));
    }
    let (out, updates) = {
        let mut fwd = Forward::new(store, mode, GroupSet::NONE);
        let x = fwd.constant(input.clone());
        let h = net.forward(&mut fwd, &[Input::Dense(x)])?;
        let out = fwd.value(h).clone();
        (out, fwd.into_parts().1)
    };
    apply_batch_norm_updates(store, &updates);
    Ok(out)
}

/// Batch of diagonal Gaussian parameters, one row per example.
#[derive(Debug, Clone)]
pub struct GaussianBatch<F> {
    pub mean: Array2<F>,
    pub log_std: Array2<F>,
}

/// Runs a Gaussian head on plain matrices, one per declared feature block;
/// class blocks take one-hot matrices of width `K`.
pub fn multi_input_forward<F: Real>(
    head: &GaussianHead,
    store: &ParamStore<F>,
    inputs: &[Array2<F>],
) -> Result<GaussianBatch<F>> {
    let mut fwd = Forward::new(store, BatchNormMode::EvalFrozen, GroupSet::NONE);
    let mut labels: Vec<Vec<usize>> = Vec::new();
    let mut vars = Vec::new();
    for (m, block) in inputs.iter().zip(head.trunk.blocks()) {
        match block {
            Block::Features { .. } => vars.push(Some(fwd.constant(m.clone()))),
            Block::Class { classes } => {
                if m.ncols() != *classes {
                    return Err(Error::dim("one-hot width", *classes, m.ncols()));
                }
                labels.push(one_hot_indices(m)?);
                vars.push(None);
            }
        }
    }
    if inputs.len() != head.trunk.first.blocks.len() {
        return Err(Error::dim(
            format!("{} input blocks", head.trunk.name),
            head.trunk.first.blocks.len(),
            inputs.len(),
        ));
    }
    let mut label_iter = labels.iter();
    let bound: Vec<Input<'_>> = vars
        .iter()
        .map(|v| match v {
            Some(v) => Input::Dense(*v),
            None => Input::Labels(label_iter.next().expect("label block")),
        })
        .collect();
    let (mean, ls) = head.forward(&mut fwd, &bound)?;
    Ok(GaussianBatch {
        mean: fwd.value(mean).clone(),
        log_std: fwd.value(ls).clone(),
    })
}

/// One-hot row embedding of class `c` among `k`.
pub fn one_hot<F: Real>(c: usize, k: usize) -> Result<Array1<F>> {
    if c >= k {
        return Err(Error::IndexOutOfRange { index: c, len: k });
    }
    let mut v = Array1::zeros(k);
    v[c] = F::one();
    Ok(v)
}

fn one_hot_indices<F: Real>(m: &Array2<F>) -> Result<Vec<usize>> {
    m.rows()
        .into_iter()
        .map(|row| {
            let hot: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != F::zero())
                .map(|(i, _)| i)
                .collect();
            match hot.as_slice() {
                [i] if row[*i] == F::one() => Ok(*i),
                _ => Err(Error::Domain("class input rows must be one-hot".into())),
            }
        })
        .collect()
}
