//! Affine coupling: pass-through coordinates `x_a` condition an affine map of
//! the remaining coordinates, `y_b = exp(log_s(x_a)) * x_b + t(x_a)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchStats, EvalMode};
use super::mlp::{Mlp, MlpCache};
use crate::error::{Error, Result};

pub const DEFAULT_SCALE_CAP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// `true` marks a pass-through coordinate.
    pub mask: Vec<bool>,
    pub s_net: Mlp,
    pub t_net: Mlp,
    /// Bound on `|log s|`; raw scale outputs go through `scale_cap * tanh(.)`.
    pub scale_cap: f64,
}

pub(crate) struct CouplingCache {
    transformed: Array2<f64>,
    log_s: Array2<f64>,
    s_cache: MlpCache,
    t_cache: MlpCache,
}

/// Column indices of the pass-through and transformed coordinates.
fn split_indices(mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let pass = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let trans = mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i).collect();
    (pass, trans)
}

impl CouplingLayer {
    pub fn validate(&self) -> Result<()> {
        let (pass, trans) = split_indices(&self.mask);
        if pass.is_empty() || trans.is_empty() {
            return Err(Error::InvalidParameter(
                "coupling mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        if !(self.scale_cap > 0.0) {
            return Err(Error::InvalidParameter(format!("scale_cap must be > 0, got {}", self.scale_cap)));
        }
        for net in [&self.s_net, &self.t_net] {
            net.validate()?;
            if net.input_width() != pass.len() {
                return Err(Error::DimensionMismatch { expected: pass.len(), got: net.input_width() });
            }
            if net.output_width() != trans.len() {
                return Err(Error::DimensionMismatch { expected: trans.len(), got: net.output_width() });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn n_params(&self) -> usize {
        self.s_net.n_params() + self.t_net.n_params()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.s_net.has_batch_norm() || self.t_net.has_batch_norm()
    }

    fn log_scale(&self, raw: Array2<f64>) -> Array2<f64> {
        let cap = self.scale_cap;
        raw.mapv_into(|r| cap * r.tanh())
    }

    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        mode: EvalMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Array2<f64>, Array1<f64>, CouplingCache)> {
        let (pass_idx, trans_idx) = split_indices(&self.mask);
        let pass = x.select(Axis(1), &pass_idx);
        let transformed = x.select(Axis(1), &trans_idx);
        let (raw_s, s_cache) = self.s_net.forward_cached(pass.view(), mode, stats)?;
        let (t, t_cache) = self.t_net.forward_cached(pass.view(), mode, stats)?;
        let log_s = self.log_scale(raw_s);
        let y_b = &transformed * &log_s.mapv(f64::exp) + &t;
        let mut y = x.to_owned();
        for (k, &col) in trans_idx.iter().enumerate() {
            y.column_mut(col).assign(&y_b.column(k));
        }
        let log_det = log_s.sum_axis(Axis(1));
        Ok((y, log_det, CouplingCache { transformed, log_s, s_cache, t_cache }))
    }

    /// Cache-free forward returning `(y, log_det)`.
    pub(crate) fn apply(&self, x: ArrayView2<f64>, group: Option<usize>) -> (Array2<f64>, Array1<f64>) {
        let (pass_idx, trans_idx) = split_indices(&self.mask);
        let pass = x.select(Axis(1), &pass_idx);
        let log_s = self.log_scale(self.s_net.apply(pass.view(), group));
        let t = self.t_net.apply(pass.view(), group);
        let mut y = x.to_owned();
        for (k, &col) in trans_idx.iter().enumerate() {
            let scaled = &x.column(col) * &log_s.column(k).mapv(f64::exp) + t.column(k);
            y.column_mut(col).assign(&scaled);
        }
        (y, log_s.sum_axis(Axis(1)))
    }

    /// Backward pass. `grad` receives `[s_net params, t_net params]`.
    pub(crate) fn backward(
        &self,
        cache: &CouplingCache,
        grad_y: &Array2<f64>,
        grad_log_det: &Array1<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let (pass_idx, trans_idx) = split_indices(&self.mask);
        let g_yb = grad_y.select(Axis(1), &trans_idx);
        let scale = cache.log_s.mapv(f64::exp);
        let g_xb = &g_yb * &scale;
        let mut g_log_s = &g_yb * &cache.transformed * &scale;
        g_log_s += &grad_log_det.view().insert_axis(Axis(1));
        let cap = self.scale_cap;
        let g_raw = ndarray::Zip::from(&g_log_s).and(&cache.log_s).map_collect(|&g, &ls| {
            let th = ls / cap;
            g * cap * (1.0 - th * th)
        });
        let ns = self.s_net.n_params();
        let (grad_s, grad_t) = grad.split_at_mut(ns);
        let g_pass_s = self.s_net.backward(&cache.s_cache, g_raw, grad_s);
        let g_pass_t = self.t_net.backward(&cache.t_cache, g_yb, grad_t);
        let mut g_x = grad_y.clone();
        for (k, &col) in pass_idx.iter().enumerate() {
            let mut c = g_x.column_mut(col);
            c += &g_pass_s.column(k);
            c += &g_pass_t.column(k);
        }
        for (k, &col) in trans_idx.iter().enumerate() {
            g_x.column_mut(col).assign(&g_xb.column(k));
        }
        g_x
    }

    /// Evaluation-mode inverse: `x_b = (y_b - t(y_a)) / s(y_a)`.
    pub fn inverse(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (pass_idx, trans_idx) = split_indices(&self.mask);
        let pass = y.select(Axis(1), &pass_idx);
        let y_b = y.select(Axis(1), &trans_idx);
        let log_s = self.log_scale(self.s_net.forward(pass.view(), EvalMode::Evaluation)?);
        let t = self.t_net.forward(pass.view(), EvalMode::Evaluation)?;
        let x_b = (&y_b - &t) * &log_s.mapv(|v| (-v).exp());
        let mut x = y.to_owned();
        for (k, &col) in trans_idx.iter().enumerate() {
            x.column_mut(col).assign(&x_b.column(k));
        }
        Ok(x)
    }
}
