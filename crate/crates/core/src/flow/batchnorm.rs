//! Batch normalization with explicit training / evaluation read modes.
//!
//! Training mode normalizes with the statistics of the batch being evaluated
//! (mean and the unbiased `1/(b-1)` variance), so every row's output depends on
//! its batch-mates. Evaluation mode reads the frozen running statistics and is
//! a per-row affine map.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Which statistics a BatchNorm layer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Training,
    Evaluation,
}

/// Per-feature mean and (unbiased) variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

/// Intermediate values kept for the backward pass of a training-mode forward.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self::with_params(width, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_params(width: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            eps,
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        for (name, len) in [
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != w {
                return Err(Error::InvalidParameter(format!("batch norm {name} has length {len}, gamma has {w}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("batch norm eps must be > 0, got {}", self.eps)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "batch norm momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter("batch norm running_var must be >= 0".into()));
        }
        Ok(())
    }

    /// Exponential moving average of the running statistics towards `stats`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean.zip_mut_with(&stats.mean, |r, &b| *r = (1.0 - m) * *r + m * b);
        self.running_var.zip_mut_with(&stats.var, |r, &b| *r = (1.0 - m) * *r + m * b);
    }

    pub(crate) fn forward_cached(
        &self,
        input: ArrayView2<f64>,
        mode: EvalMode,
    ) -> Result<(Array2<f64>, BatchStats, BatchNormCache)> {
        let n = input.nrows();
        let stats = match mode {
            EvalMode::Training => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(n));
                }
                batch_stats(input)
            }
            EvalMode::Evaluation => BatchStats { mean: self.running_mean.clone(), var: self.running_var.clone() },
        };
        let inv_std = stats.var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let normalized = (&input - &stats.mean) * &inv_std;
        let output = &normalized * &self.gamma + &self.beta;
        Ok((output, stats, BatchNormCache { normalized, inv_std }))
    }
}

impl BatchNormState {
    /// In-place normalization for the cache-free paths. `group = Some(g)`
    /// treats every `g` consecutive rows as one training-mode batch; `None`
    /// reads the running statistics.
    pub(crate) fn normalize_in_place(&self, x: &mut Array2<f64>, group: Option<usize>) {
        let apply = |mut chunk: ndarray::ArrayViewMut2<f64>, mean: &Array1<f64>, var: &Array1<f64>| {
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            for mut row in chunk.rows_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = (*x - mean[j]) * inv_std[j] * self.gamma[j] + self.beta[j];
                }
            }
        };
        match group {
            Some(g) => {
                for chunk in x.axis_chunks_iter_mut(Axis(0), g) {
                    let stats = batch_stats(chunk.view());
                    apply(chunk, &stats.mean, &stats.var);
                }
            }
            None => apply(x.view_mut(), &self.running_mean, &self.running_var),
        }
    }
}

/// Column means and unbiased column variances.
pub fn batch_stats(input: ArrayView2<f64>) -> BatchStats {
    let n = input.nrows() as f64;
    let mean = input.sum_axis(Axis(0)) / n;
    let mut var = Array1::<f64>::zeros(input.ncols());
    for row in input.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let d = x - m;
            *v += d * d;
        }
    }
    var /= n - 1.0;
    BatchStats { mean, var }
}

/// Normalizes `input` column-wise with the statistics selected by `mode` and
/// returns the statistics that were actually used.
pub fn batchnorm_forward(
    state: &BatchNormState,
    input: ArrayView2<f64>,
    mode: EvalMode,
) -> Result<(Array2<f64>, BatchStats)> {
    if input.ncols() != state.width() {
        return Err(Error::DimensionMismatch { expected: state.width(), got: input.ncols() });
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("batch norm input".into()));
    }
    let (out, stats, _) = state.forward_cached(input, mode)?;
    Ok((out, stats))
}

/// Gradients of a training-mode BatchNorm w.r.t. its input, gamma and beta,
/// including the paths through the batch mean and variance.
pub(crate) fn batchnorm_backward(
    state: &BatchNormState,
    cache: &BatchNormCache,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = grad_out.nrows() as f64;
    let xhat = &cache.normalized;
    let grad_gamma = (grad_out * xhat).sum_axis(Axis(0));
    let grad_beta = grad_out.sum_axis(Axis(0));
    let grad_xhat = grad_out * &state.gamma;
    let mean_g = grad_xhat.sum_axis(Axis(0)) / n;
    let proj = (&grad_xhat * xhat).sum_axis(Axis(0)) / (n - 1.0);
    let grad_in = (&grad_xhat - &mean_g - &(xhat * &proj)) * &cache.inv_std;
    (grad_in, grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_state(width: usize, eps: f64) -> BatchNormState {
        let mut s = BatchNormState::new(width);
        s.eps = eps;
        s
    }

    #[test]
    fn training_mode_uses_unbiased_variance() {
        // mean 2, unbiased variance 2: outputs are -1/sqrt(2), +1/sqrt(2)
        let state = unit_state(1, f64::MIN_POSITIVE);
        let x = array![[1.0], [3.0]];
        let (out, stats) = batchnorm_forward(&state, x.view(), EvalMode::Training).unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.var[0], 2.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[[0, 0]] + h).abs() < 1e-15);
        assert!((out[[1, 0]] - h).abs() < 1e-15);
    }

    #[test]
    fn evaluation_with_unit_running_stats_is_identity() {
        let state = unit_state(3, f64::MIN_POSITIVE);
        let x = array![[0.3, -2.0, 7.5], [1e3, 0.0, -4.25]];
        let (out, stats) = batchnorm_forward(&state, x.view(), EvalMode::Evaluation).unwrap();
        assert_eq!(out, x);
        assert_eq!(stats.var, array![1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut state = unit_state(1, 1e-5);
        state.beta[0] = 0.75;
        state.gamma[0] = 3.0;
        let x = array![[4.0], [4.0], [4.0]];
        let (out, _) = batchnorm_forward(&state, x.view(), EvalMode::Training).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn single_row_training_batch_is_rejected() {
        let state = BatchNormState::new(2);
        let x = array![[1.0, 2.0]];
        assert!(matches!(batchnorm_forward(&state, x.view(), EvalMode::Training), Err(Error::DegenerateBatch(1))));
        // evaluation mode is per-row and accepts it
        assert!(batchnorm_forward(&state, x.view(), EvalMode::Evaluation).is_ok());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let state = BatchNormState::new(1);
        let x = array![[1.0], [f64::NAN]];
        assert!(matches!(batchnorm_forward(&state, x.view(), EvalMode::Training), Err(Error::NonFinite(_))));
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut state = BatchNormState::with_params(1, 1e-5, 0.1);
        let stats = BatchStats { mean: array![2.0], var: array![3.0] };
        state.update_running(&stats);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var[0] - (0.9 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut state = BatchNormState::new(2);
        state.gamma = array![1.3, -0.7];
        state.beta = array![0.2, 0.1];
        let x = array![[0.5, 1.0], [-1.2, 0.3], [2.0, -0.4], [0.1, 0.9]];
        let w = array![[0.3, -1.0], [1.1, 0.4], [-0.6, 0.8], [0.9, 0.2]];
        let objective = |x: &Array2<f64>, s: &BatchNormState| {
            let (y, _) = batchnorm_forward(s, x.view(), EvalMode::Training).unwrap();
            (&y * &y * &w).sum()
        };
        let (y, _, cache) = state.forward_cached(x.view(), EvalMode::Training).unwrap();
        let g_out = 2.0 * &y * &w;
        let (g_in, g_gamma, _) = batchnorm_backward(&state, &cache, &g_out);
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (objective(&xp, &state) - objective(&xm, &state)) / (2.0 * h);
                assert!((fd - g_in[[i, j]]).abs() < 1e-6, "input grad ({i},{j}): {fd} vs {}", g_in[[i, j]]);
            }
        }
        for j in 0..2 {
            let mut sp = state.clone();
            sp.gamma[j] += h;
            let mut sm = state.clone();
            sm.gamma[j] -= h;
            let fd = (objective(&x, &sp) - objective(&x, &sm)) / (2.0 * h);
            assert!((fd - g_gamma[j]).abs() < 1e-6);
        }
    }
}
