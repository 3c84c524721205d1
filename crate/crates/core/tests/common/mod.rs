//! Helpers shared by the integration tests.

#![allow(dead_code)]

use ndarray::{s, Array2, ArrayView2};
use oodnorm::flow::{log_likelihood_batched, FlowConfig, FlowModel};
use oodnorm::rng::seeded;
use oodnorm::train::loss_and_grad;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// A small perturbed flow (batch norm in three cases out of four) and a batch.
pub fn random_gradient_case(seed: u64) -> (FlowModel, Array2<f64>) {
    let mut rng = seeded(seed);
    let dim = rng.random_range(2..=4);
    let cfg = FlowConfig {
        dim,
        n_layers: rng.random_range(2..=3),
        hidden: rng.random_range(2..=5),
        depth: rng.random_range(1..=2),
        batch_norm: seed % 4 != 3,
        ..Default::default()
    };
    let mut model = FlowModel::new(&cfg, seed).unwrap();
    let params: Vec<f64> = model.param_vector().iter().map(|p| p + rng.random_range(-0.5..0.5)).collect();
    model.set_param_vector(&params).unwrap();
    let n = rng.random_range(2..=9);
    let batch = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2.0..2.0));
    (model, batch)
}

/// First parameter whose analytic gradient disagrees with the central
/// difference, as `(index, analytic, finite_difference)`.
pub fn gradient_mismatch(model: &FlowModel, batch: &Array2<f64>) -> Option<(usize, f64, f64)> {
    let analytic = loss_and_grad(model, batch.view()).unwrap().grad;
    let base = model.param_vector();
    assert_eq!(analytic.len(), base.len());
    let mut probe = model.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_param_vector(&p).unwrap();
        let up = loss_and_grad(&probe, batch.view()).unwrap().loss;
        p[i] = base[i] - FD_STEP;
        probe.set_param_vector(&p).unwrap();
        let down = loss_and_grad(&probe, batch.view()).unwrap().loss;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        if (a - fd).abs() > FD_REL_TOL * a.abs().max(fd.abs()) + FD_ABS_FLOOR {
            return Some((i, a, fd));
        }
    }
    None
}

/// Riemann sum of `exp(l(x; cond))` over the square `[-8, 8]^2` of a 2D
/// flow, with `cond` filling the other rows of every training-mode batch.
pub fn integrate_2d(model: &FlowModel, cond: ArrayView2<f64>, step: f64) -> f64 {
    let b = cond.nrows() + 1;
    let n = (16.0 / step).round() as usize + 1;
    let points: Vec<(f64, f64)> =
        (0..n).flat_map(|i| (0..n).map(move |k| (-8.0 + i as f64 * step, -8.0 + k as f64 * step))).collect();
    let mut total = 0.0;
    for chunk in points.chunks(512) {
        let mut x = Array2::zeros((chunk.len() * b, 2));
        for (g, &(u, v)) in chunk.iter().enumerate() {
            x[[g * b, 0]] = u;
            x[[g * b, 1]] = v;
            x.slice_mut(s![g * b + 1..(g + 1) * b, ..]).assign(&cond);
        }
        let ll = log_likelihood_batched(model, x.view(), b).unwrap();
        total += (0..chunk.len()).map(|g| ll[g * b].exp()).sum::<f64>();
    }
    total * step * step
}
