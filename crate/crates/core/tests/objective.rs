mod common;

use cagem::classify::{p_classifier_with_noise, q_classifier_with_noise};
use cagem::model::{ElboNoise, Model, Variant};
use cagem::nets::BatchNormMode;
use cagem::objective::{
    compute_alpha, elbo_gradient, labelled_cross_entropies, training_step_with_noise,
    LabelledBatch, StepConfig,
};
use cagem::optim::Adam;
use cagem::Error;
use common::*;
use rand::Rng;

#[test]
fn alpha_examples() {
    assert!((compute_alpha(1.0, 900, 100).unwrap() - 10.0).abs() < 1e-12);
    assert!((compute_alpha(0.1, 59_900, 100).unwrap() - 60.0).abs() < 1e-9);
    assert!((compute_alpha(1.0, 0, 50).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(compute_alpha(1.0, 10, 0), Err(Error::Config(_))));
    assert!(compute_alpha(0.0, 10, 10).is_err());
}

fn labels(n: usize, k: usize, r: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

#[test]
fn cross_entropy_gradients_touch_only_classifier_heads() {
    let mut r = rng(11);
    for trial in 0..20u64 {
        let k = 2 + (trial as usize % 3);
        let x_dim = 2 + (trial as usize % 4);
        let z = 1 + (trial as usize % 3);
        let mut cfg = toy_config(Variant::Cagem, k, x_dim, z);
        cfg.hidden = vec![2 + trial as usize % 3; 1 + trial as usize % 2];
        let mut model = Model::<f64>::new(cfg.clone(), trial).unwrap();
        scramble(&mut model, 1000 + trial);
        let x = binary_batch(5, x_dim, &mut r);
        let y = labels(5, k, &mut r);
        let noise = ElboNoise::sample(&cfg, 5, &mut r);
        let stats_before: Vec<_> = model.store.buffer_ids().map(|b| model.store.buffer(b).clone()).collect();
        let ce = labelled_cross_entropies(&model, &x, &y, &noise).unwrap();
        let stats_after: Vec<_> = model.store.buffer_ids().map(|b| model.store.buffer(b).clone()).collect();
        assert_eq!(stats_before, stats_after);
        assert!(ce.ce_p >= 0.0 && ce.ce_q >= 0.0);
        let mut head_grads = 0;
        for id in model.store.ids() {
            let g = ce.grads.get(id);
            if model.store.group(id).is_class_head() {
                head_grads += g.is_some() as usize;
            } else {
                // parameters outside the heads are graph constants: no entry,
                // i.e. a gradient of exactly zero
                assert!(g.is_none(), "trial {trial}: {} got a gradient", model.store.name(id));
            }
        }
        assert!(head_grads > 0);
    }
}

#[test]
fn cross_entropies_match_classifier_estimates_on_shared_noise() {
    // without batch norm the labelled forward and the classifiers coincide
    let mut r = rng(12);
    let mut cfg = toy_config(Variant::Cagem, 3, 4, 2);
    cfg.batch_norm = false;
    let mut model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    scramble(&mut model, 2);
    let x = binary_batch(6, 4, &mut r);
    let y = labels(6, 3, &mut r);
    let noise = ElboNoise::sample(&cfg, 6, &mut r);
    let ce = labelled_cross_entropies(&model, &x, &y, &noise).unwrap();
    let q = q_classifier_with_noise(&model, &x, &[noise.z1.clone()]).unwrap();
    let p = p_classifier_with_noise(&model, &x, std::slice::from_ref(&noise)).unwrap();
    let mean_nll = |probs: &ndarray::Array2<f64>| {
        y.iter().enumerate().map(|(b, &c)| -probs[[b, c]].ln()).sum::<f64>() / 6.0
    };
    assert!((ce.ce_q - mean_nll(&q)).abs() < 1e-9);
    assert!((ce.ce_p - mean_nll(&p)).abs() < 1e-9);
}

#[test]
fn labelled_forward_uses_batch_statistics() {
    let mut r = rng(15);
    let cfg = toy_config(Variant::Cagem, 3, 4, 2);
    let mut model = Model::<f64>::new(cfg.clone(), 2).unwrap();
    scramble(&mut model, 4);
    let x = binary_batch(6, 4, &mut r);
    let y = labels(6, 3, &mut r);
    let noise = ElboNoise::sample(&cfg, 6, &mut r);
    let a = labelled_cross_entropies(&model, &x, &y, &noise).unwrap();
    scramble(&mut model, 4);
    let bufs: Vec<_> = model.store.buffer_ids().collect();
    for b in bufs {
        model.store.buffer_mut(b).mapv_inplace(|v| v * 3.0 + 1.0);
    }
    let b = labelled_cross_entropies(&model, &x, &y, &noise).unwrap();
    assert_eq!((a.ce_p, a.ce_q), (b.ce_p, b.ce_q));
    assert!(matches!(
        labelled_cross_entropies(&model, &x.slice(ndarray::s![..1, ..]).to_owned(), &y[..1], &ElboNoise::sample(&cfg, 1, &mut r)),
        Err(Error::DegenerateBatch { .. })
    ));
}

#[test]
fn perfect_classifier_has_near_zero_cross_entropy() {
    let mut r = rng(13);
    let cfg = toy_config(Variant::Cagem, 3, 4, 2);
    let mut model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    scramble(&mut model, 3);
    fill(&mut model, &["q_y", "p_y"], &[".out.w", ".out.b"], 0.0);
    for head in ["q_y", "p_y"] {
        let id = model.store.find(&format!("{head}.out.b")).unwrap();
        model.store.value_mut(id)[[0, 2]] = 60.0;
    }
    let x = binary_batch(4, 4, &mut r);
    let noise = ElboNoise::sample(&cfg, 4, &mut r);
    let ce = labelled_cross_entropies(&model, &x, &[2, 2, 2, 2], &noise).unwrap();
    assert!(ce.ce_q < 1e-5 && ce.ce_p < 1e-5, "{} {}", ce.ce_q, ce.ce_p);
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut r = rng(14);
    let cfg = toy_config(Variant::Cagem, 3, 3, 2);
    let mut model = Model::<f64>::new(cfg.clone(), 4).unwrap();
    scramble(&mut model, 5);
    let x = binary_batch(4, 3, &mut r);
    let y = labels(4, 3, &mut r);
    let noise = ElboNoise::sample(&cfg, 4, &mut r);
    let ce = labelled_cross_entropies(&model, &x, &y, &noise).unwrap();
    let heads: Vec<_> = model
        .store
        .ids()
        .filter(|&id| model.store.group(id).is_class_head())
        .collect();
    let f = |m: &Model<f64>| {
        let c = labelled_cross_entropies(m, &x, &y, &noise).unwrap();
        c.ce_p + c.ce_q
    };
    assert!(check_gradients(&model, &heads, &ce.grads, f) > 0);
}

#[test]
fn labels_are_validated() {
    let cfg = toy_config(Variant::Cagem, 3, 3, 2);
    let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
    let x = ndarray::Array2::zeros((2, 3));
    let noise = ElboNoise::zeros(&cfg, 2);
    assert!(matches!(
        labelled_cross_entropies(&model, &x, &[0, 3], &noise),
        Err(Error::IndexOutOfRange { index: 3, len: 3 })
    ));
    let vae = Model::<f64>::new(toy_config(Variant::Vae, 1, 3, 2), 0).unwrap();
    assert!(labelled_cross_entropies(&vae, &x, &[0, 0], &ElboNoise::zeros(vae.config(), 2)).is_err());
}

struct Fixture {
    model: Model<f64>,
    xu: ndarray::Array2<f64>,
    xl: ndarray::Array2<f64>,
    yl: Vec<usize>,
    nu: ElboNoise<f64>,
    nl: ElboNoise<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let cfg = toy_config(Variant::Cagem, 3, 6, 2);
    let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
    Fixture {
        xu: binary_batch(8, 6, &mut r),
        xl: binary_batch(3, 6, &mut r),
        yl: labels(3, 3, &mut r),
        nu: ElboNoise::sample(&cfg, 8, &mut r),
        nl: ElboNoise::sample(&cfg, 3, &mut r),
        model,
    }
}

fn step_cfg(alpha: f64) -> StepConfig {
    StepConfig {
        lr: 1e-3,
        tau: 1.0,
        alpha,
        n_unlabelled: 80,
        n_labelled: 3,
    }
}

fn params(m: &Model<f64>) -> Vec<ndarray::Array2<f64>> {
    m.store.ids().map(|id| m.store.value(id).clone()).collect()
}

#[test]
fn unsupervised_step_reports_elbo_only() {
    let mut f = fixture(1);
    let mut adam = Adam::new(f.model.store.len());
    let out = training_step_with_noise(&mut f.model, &mut adam, &f.xu, &f.nu, None, None, &step_cfg(5.0))
        .unwrap();
    assert_eq!(out.total, out.elbo_sum);
    assert_eq!(out.ce_p, 0.0);
    assert_eq!(out.ce_q, 0.0);
}

#[test]
fn zero_alpha_step_equals_unsupervised_step() {
    let f = fixture(2);
    let mut a = f.model.clone();
    let mut b = f.model.clone();
    let mut adam_a = Adam::new(a.store.len());
    let mut adam_b = Adam::new(b.store.len());
    training_step_with_noise(&mut a, &mut adam_a, &f.xu, &f.nu, None, None, &step_cfg(0.0)).unwrap();
    let lab = LabelledBatch { x: &f.xl, labels: &f.yl };
    let out = training_step_with_noise(&mut b, &mut adam_b, &f.xu, &f.nu, Some(lab), Some(&f.nl), &step_cfg(0.0))
        .unwrap();
    assert_eq!(params(&a), params(&b));
    assert_eq!(out.total, out.elbo_sum);
}

#[test]
fn total_combines_terms() {
    let mut f = fixture(3);
    let mut adam = Adam::new(f.model.store.len());
    let lab = LabelledBatch { x: &f.xl, labels: &f.yl };
    let out = training_step_with_noise(&mut f.model, &mut adam, &f.xu, &f.nu, Some(lab), Some(&f.nl), &step_cfg(2.5))
        .unwrap();
    assert!((out.total - (out.elbo_sum - 2.5 * (out.ce_p + out.ce_q))).abs() < 1e-9);
    assert!(out.ce_p > 0.0 && out.ce_q > 0.0);
}

#[test]
fn small_step_decreases_the_loss_on_the_same_batch() {
    let f = fixture(4);
    let cfg = step_cfg(2.0);
    let loss = |m: &Model<f64>| {
        let mut m = m.clone();
        let e = elbo_gradient(&mut m, &f.xu, &f.nu, cfg.tau, BatchNormMode::TrainCollect).unwrap();
        let ce = labelled_cross_entropies(&m, &f.xl, &f.yl, &f.nl).unwrap();
        -e.mean_elbo + cfg.alpha * cfg.n_labelled as f64 / cfg.n_unlabelled as f64 * (ce.ce_p + ce.ce_q)
    };
    let before = loss(&f.model);
    let mut m = f.model.clone();
    // compare against a copy whose running statistics see the same update
    let mut adam = Adam::new(m.store.len());
    let lab = LabelledBatch { x: &f.xl, labels: &f.yl };
    training_step_with_noise(&mut m, &mut adam, &f.xu, &f.nu, Some(lab), Some(&f.nl), &StepConfig { lr: 1e-4, ..cfg })
        .unwrap();
    let mut reference = f.model.clone();
    reference.elbo_with_mode(&f.xu, &f.nu, cfg.tau, BatchNormMode::TrainCollect).unwrap();
    let before_same_stats = loss(&reference);
    let after = loss(&m);
    assert!(after < before_same_stats, "{after} !< {before_same_stats} (initial {before})");
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut f = fixture(5);
    fill(&mut f.model, &["p_x"], &[".out.b"], f64::NAN);
    let snapshot = params(&f.model);
    let mut adam = Adam::new(f.model.store.len());
    let err = training_step_with_noise(&mut f.model, &mut adam, &f.xu, &f.nu, None, None, &step_cfg(1.0))
        .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    let after = params(&f.model);
    for (a, b) in snapshot.iter().zip(&after) {
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u == v || (u.is_nan() && v.is_nan())));
    }
}
