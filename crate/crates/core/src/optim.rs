use ndarray::Array2;

use crate::autodiff::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are allocated lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub step: u64,
    pub m: Vec<Option<Array2<F>>>,
    pub v: Vec<Option<Array2<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// Descends along `grads` (gradients of a loss to minimize).
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::lit(ADAM_BETA1);
        let b2 = F::lit(ADAM_BETA2);
        let c1 = F::lit(1.0 - ADAM_BETA1.powi(t));
        let c2 = F::lit(1.0 - ADAM_BETA2.powi(t));
        let lr = F::lit(lr);
        let eps = F::lit(ADAM_EPS);
        let one = F::one();
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Array2<F>, &Array2<F>)> {
        match (&self.m[id.index()], &self.v[id.index()]) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add_param("w", array![[1.0, -1.0]], ParamGroup::Generative)
            .unwrap();
        let mut g = Gradients::new();
        g.insert(id, array![[3.0, -0.5]]);
        let mut adam = Adam::new(store.len());
        adam.update(&mut store, &g, 0.01);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.99).abs() < 1e-8);
        assert!((w[[0, 1]] + 0.99).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", array![[5.0]], ParamGroup::Generative).unwrap();
        let mut adam = Adam::new(1);
        for _ in 0..2000 {
            let w = store.value(id)[[0, 0]];
            let mut g = Gradients::new();
            g.insert(id, array![[2.0 * (w - 2.0)]]);
            adam.update(&mut store, &g, 0.05);
        }
        assert!((store.value(id)[[0, 0]] - 2.0).abs() < 1e-3);
    }
}
