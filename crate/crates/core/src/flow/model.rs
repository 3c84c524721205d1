use std::f64::consts::{LN_2, PI};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::batchnorm::{BatchNormState, BatchStats, EvalMode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use super::coupling::{CouplingCache, CouplingLayer, DEFAULT_SCALE_CAP};
use super::mlp::{Activation, Dense, Mlp};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// A dense sample matrix, one row per sample, with only finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch(Array2<f64>);

impl Batch {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Empty("batch has no rows".into()));
        }
        check_finite(data.view(), "batch")?;
        Ok(Self(data))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

impl AsRef<Array2<f64>> for Batch {
    fn as_ref(&self) -> &Array2<f64> {
        &self.0
    }
}

pub(crate) fn check_finite(x: ArrayView2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Architecture of a freshly initialized flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub hidden: usize,
    /// Number of hidden layers in each s/t network.
    pub depth: usize,
    pub batch_norm: bool,
    pub scale_cap: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            n_layers: 4,
            hidden: 16,
            depth: 2,
            batch_norm: true,
            scale_cap: DEFAULT_SCALE_CAP,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Per-sample latents and log-determinants of one forward pass, plus the
/// batch-norm statistics it read (in [`FlowModel::norms`] order).
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub latents: Array2<f64>,
    pub log_det: Array1<f64>,
    pub stats: Vec<BatchStats>,
}

pub(crate) struct FlowCache {
    layers: Vec<CouplingCache>,
}

/// A stack of affine coupling layers over a standard-normal prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Random initialization with alternating even/odd masks; layer 0 passes
    /// the even coordinates through.
    pub fn new(cfg: &FlowConfig, seed: u64) -> Result<Self> {
        if cfg.dim < 2 {
            return Err(Error::InvalidParameter(format!("flow dim must be >= 2, got {}", cfg.dim)));
        }
        if cfg.n_layers < 2 {
            return Err(Error::InvalidParameter(format!(
                "flow needs >= 2 layers so every coordinate is transformed, got {}",
                cfg.n_layers
            )));
        }
        if cfg.hidden == 0 {
            return Err(Error::InvalidParameter("hidden width must be >= 1".into()));
        }
        let mut rng = seeded(seed);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mask = alternating_mask(cfg.dim, l);
                let n_pass = mask.iter().filter(|&&m| m).count();
                let n_trans = cfg.dim - n_pass;
                let mk = |rng: &mut _| {
                    Mlp::new(n_pass, cfg.hidden, cfg.depth, n_trans, cfg.batch_norm, cfg.eps, cfg.momentum, rng)
                };
                let s_net = mk(&mut rng);
                let t_net = mk(&mut rng);
                CouplingLayer { mask, s_net, t_net, scale_cap: cfg.scale_cap }
            })
            .collect();
        let model = Self { dim: cfg.dim, layers };
        model.validate()?;
        Ok(model)
    }

    /// Two coupling layers whose scale and shift networks output zero.
    pub fn identity(dim: usize) -> Self {
        let layers = (0..2)
            .map(|l| {
                let mask = alternating_mask(dim, l);
                let n_pass = mask.iter().filter(|&&m| m).count();
                CouplingLayer {
                    s_net: Mlp::zero(n_pass, dim - n_pass),
                    t_net: Mlp::zero(n_pass, dim - n_pass),
                    mask,
                    scale_cap: DEFAULT_SCALE_CAP,
                }
            })
            .collect();
        Self { dim, layers }
    }

    /// The single additive coupling `z1 = x1`, `z2 = x2 + gamma * BN(x1) + beta`.
    ///
    /// Only the batch norm's `gamma` and `beta` are trainable; the linear maps
    /// around it are frozen at 1 and the scale network is fixed at zero.
    pub fn two_d_example(gamma: f64, beta: f64) -> Self {
        let mut bn = BatchNormState::new(1);
        bn.gamma[0] = gamma;
        bn.beta[0] = beta;
        let unit = |norm| Dense {
            weight: Array2::ones((1, 1)),
            bias: Array1::zeros(1),
            norm,
            activation: Activation::Identity,
            frozen: true,
        };
        let t_net = Mlp { layers: vec![unit(Some(bn)), unit(None)] };
        Self {
            dim: 2,
            layers: vec![CouplingLayer {
                mask: vec![true, false],
                s_net: Mlp::zero(1, 1),
                t_net,
                scale_cap: DEFAULT_SCALE_CAP,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter("flow has no layers".into()));
        }
        for layer in &self.layers {
            if layer.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, got: layer.dim() });
            }
            layer.validate()?;
        }
        Ok(())
    }

    /// Whether every coordinate is transformed by at least one layer.
    pub fn covers_all_coordinates(&self) -> bool {
        (0..self.dim).all(|i| self.layers.iter().any(|l| !l.mask[i]))
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(CouplingLayer::has_batch_norm)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(CouplingLayer::n_params).sum()
    }

    /// Trainable parameters flattened in a fixed order: per layer, the scale
    /// network then the shift network; per dense layer, weight (row-major),
    /// bias, then batch-norm gamma and beta.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            layer.s_net.write_params(&mut out);
            layer.t_net.write_params(&mut out);
        }
        out
    }

    pub fn set_param_vector(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: params.len() });
        }
        let mut src = params;
        for layer in &mut self.layers {
            layer.s_net.read_params(&mut src);
            layer.t_net.read_params(&mut src);
        }
        Ok(())
    }

    /// Batch-norm layers in forward-pass order.
    pub fn norms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.layers.iter().flat_map(|l| l.s_net.norms().chain(l.t_net.norms()))
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.layers.iter_mut().flat_map(|l| l.s_net.norms_mut().chain(l.t_net.norms_mut()))
    }

    pub fn set_momentum(&mut self, momentum: f64) {
        for bn in self.norms_mut() {
            bn.momentum = momentum;
        }
    }

    /// Applies one EMA step per batch-norm layer with the statistics returned
    /// by a training-mode forward pass.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let n = self.norms().count();
        if stats.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: stats.len() });
        }
        for (bn, s) in self.norms_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>, mode: EvalMode) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.ncols() });
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("flow input has no rows".into()));
        }
        if mode == EvalMode::Training && x.nrows() < 2 && self.has_batch_norm() {
            return Err(Error::DegenerateBatch(x.nrows()));
        }
        check_finite(x, "flow input")
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>, mode: EvalMode) -> Result<(FlowOutput, FlowCache)> {
        let mut stats = Vec::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let mut log_det = Array1::zeros(x.nrows());
        for layer in &self.layers {
            let (y, ld, cache) = layer.forward_cached(h.view(), mode, &mut stats)?;
            log_det += &ld;
            caches.push(cache);
            h = y;
        }
        Ok((FlowOutput { latents: h, log_det, stats }, FlowCache { layers: caches }))
    }

    /// Reverse pass from gradients on latents and per-sample log-determinants
    /// to the flat trainable-parameter gradient (see [`param_vector`]).
    ///
    /// [`param_vector`]: FlowModel::param_vector
    pub(crate) fn backward(&self, cache: &FlowCache, grad_z: Array2<f64>, grad_log_det: &Array1<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.n_params();
        }
        offsets.push(acc);
        let mut g = grad_z;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&cache.layers[i], &g, grad_log_det, &mut grad[offsets[i]..offsets[i + 1]]);
        }
        grad
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn alternating_mask(dim: usize, layer: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == layer % 2).collect()
}

/// Latents and per-sample log-determinants of `x`.
pub fn flow_forward(model: &FlowModel, x: ArrayView2<f64>, mode: EvalMode) -> Result<FlowOutput> {
    model.check_input(x, mode)?;
    model.forward_cached(x, mode).map(|(out, _)| out)
}

/// Maps latents back to data space using running statistics.
pub fn flow_inverse(model: &FlowModel, latents: ArrayView2<f64>) -> Result<Array2<f64>> {
    if latents.ncols() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: latents.ncols() });
    }
    check_finite(latents, "latents")?;
    let mut h = latents.to_owned();
    for layer in model.layers.iter().rev() {
        h = layer.inverse(h.view())?;
    }
    check_finite(h.view(), "inverse output")?;
    Ok(h)
}

/// Standard-normal log-density of each row.
pub fn prior_log_density(z: ArrayView2<f64>) -> Array1<f64> {
    let c = 0.5 * z.ncols() as f64 * (2.0 * PI).ln();
    z.map_axis(Axis(1), |row| -0.5 * row.dot(&row) - c)
}

fn finite_loglik(model: &FlowModel, x: ArrayView2<f64>, group: Option<usize>) -> Result<Array1<f64>> {
    let mut h = x.to_owned();
    let mut log_det = Array1::zeros(x.nrows());
    for layer in &model.layers {
        let (y, ld) = layer.apply(h.view(), group);
        log_det += &ld;
        h = y;
    }
    let ll = prior_log_density(h.view()) + &log_det;
    if ll.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    Ok(ll)
}

/// Per-sample log-likelihood in nats.
pub fn log_likelihood(model: &FlowModel, x: ArrayView2<f64>, mode: EvalMode) -> Result<Array1<f64>> {
    model.check_input(x, mode)?;
    let group = (mode == EvalMode::Training).then_some(x.nrows());
    finite_loglik(model, x, group)
}

/// Training-mode log-likelihoods of many independent batches at once: rows
/// `k * batch_size .. (k + 1) * batch_size` form batch `k`. Equivalent to
/// calling [`log_likelihood`] on each block.
pub fn log_likelihood_batched(model: &FlowModel, x: ArrayView2<f64>, batch_size: usize) -> Result<Array1<f64>> {
    if batch_size < 2 {
        return Err(Error::DegenerateBatch(batch_size));
    }
    if !x.nrows().is_multiple_of(batch_size) {
        return Err(Error::InvalidParameter(format!("{} rows do not split into batches of {batch_size}", x.nrows())));
    }
    model.check_input(x, EvalMode::Evaluation)?;
    finite_loglik(model, x, Some(batch_size))
}

/// Bits per dimension: `-loglik / (dim * ln 2)`.
pub fn bpd(loglik_nats: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidParameter("bpd needs dim >= 1".into()));
    }
    let denom = dim as f64 * LN_2;
    Ok(loglik_nats.iter().map(|ll| -ll / denom).collect())
}

/// Training-mode log-likelihood of row `j` of `test` when evaluated in one
/// batch together with every row of `reference` (which may be empty).
pub fn mixed_conditional_loglik(
    model: &FlowModel,
    test: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    j: usize,
) -> Result<f64> {
    if j >= test.nrows() {
        return Err(Error::IndexOutOfRange { index: j, len: test.nrows() });
    }
    if reference.nrows() > 0 && reference.ncols() != test.ncols() {
        return Err(Error::DimensionMismatch { expected: test.ncols(), got: reference.ncols() });
    }
    let combined = if reference.nrows() == 0 {
        test.to_owned()
    } else {
        ndarray::concatenate(Axis(0), &[test, reference]).expect("column counts checked")
    };
    Ok(log_likelihood(model, combined.view(), EvalMode::Training)?[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};

    fn small_model(bn: bool, seed: u64) -> FlowModel {
        let cfg = FlowConfig { dim: 3, n_layers: 3, hidden: 5, depth: 2, batch_norm: bn, ..Default::default() };
        FlowModel::new(&cfg, seed).unwrap()
    }

    fn perturb(model: &mut FlowModel, seed: u64) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let p: Vec<f64> = model.param_vector().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        model.set_param_vector(&p).unwrap();
        for bn in model.norms_mut() {
            bn.running_mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
        }
    }

    #[test]
    fn identity_flow_is_identity() {
        let model = FlowModel::identity(2);
        let x = array![[0.5, -1.0], [3.0, 2.0], [0.0, 0.0]];
        for mode in [EvalMode::Training, EvalMode::Evaluation] {
            let out = flow_forward(&model, x.view(), mode).unwrap();
            assert_eq!(out.latents, x);
            assert!(out.log_det.iter().all(|&v| v == 0.0));
        }
        assert_eq!(flow_inverse(&model, x.view()).unwrap(), x);
        let origin = flow_inverse(&model, Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(origin, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_flow_loglik_at_origin() {
        let ll = log_likelihood(&FlowModel::identity(2), Array2::zeros((1, 2)).view(), EvalMode::Evaluation).unwrap();
        assert!((ll[0] - (-(2.0 * PI).ln())).abs() < 1e-12);
        assert!((ll[0] + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn two_d_example_has_unit_determinant() {
        let model = FlowModel::two_d_example(1.3, 0.2);
        let x = array![[1.0, 0.0], [-1.0, 0.01], [0.9, -0.02], [-1.1, 0.0]];
        for mode in [EvalMode::Training, EvalMode::Evaluation] {
            let out = flow_forward(&model, x.view(), mode).unwrap();
            assert!(out.log_det.iter().all(|&v| v == 0.0));
            assert_eq!(out.latents.column(0), x.column(0));
        }
        // evaluation with running stats (0, 1): z2 = x2 + 1.3 x1 / sqrt(1 + eps) + 0.2
        let out = flow_forward(&model, x.view(), EvalMode::Evaluation).unwrap();
        let expect = 0.01 + -1.3 / (1.0f64 + 1e-5).sqrt() + 0.2;
        assert!((out.latents[[1, 1]] - expect).abs() < 1e-15);
    }

    #[test]
    fn mode_is_irrelevant_without_batch_norm() {
        let mut model = small_model(false, 11);
        perturb(&mut model, 12);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 * 0.7 - j as f64 * 1.3).sin() * 2.0);
        let a = log_likelihood(&model, x.view(), EvalMode::Training).unwrap();
        let b = log_likelihood(&model, x.view(), EvalMode::Evaluation).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn evaluation_mode_is_batch_independent() {
        let mut model = small_model(true, 21);
        perturb(&mut model, 22);
        let x = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).cos() * 1.5);
        let full = log_likelihood(&model, x.view(), EvalMode::Evaluation).unwrap();
        let head = log_likelihood(&model, x.slice(s![..3, ..]), EvalMode::Evaluation).unwrap();
        assert_eq!(full.slice(s![..3]), head);
        let single = log_likelihood(&model, x.slice(s![5..6, ..]), EvalMode::Evaluation).unwrap();
        assert_eq!(single[0], full[5]);
    }

    #[test]
    fn training_mode_couples_rows() {
        let mut model = small_model(true, 31);
        perturb(&mut model, 32);
        let x = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).cos() * 1.5);
        let full = log_likelihood(&model, x.view(), EvalMode::Training).unwrap();
        let head = log_likelihood(&model, x.slice(s![..4, ..]), EvalMode::Training).unwrap();
        assert!((full[0] - head[0]).abs() > 1e-9);
    }

    #[test]
    fn fast_paths_agree_with_cached_forward() {
        let mut model = small_model(true, 91);
        perturb(&mut model, 92);
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin() * 2.0);
        for mode in [EvalMode::Training, EvalMode::Evaluation] {
            let out = flow_forward(&model, x.view(), mode).unwrap();
            let slow = prior_log_density(out.latents.view()) + &out.log_det;
            assert_eq!(log_likelihood(&model, x.view(), mode).unwrap(), slow);
        }
        let batched = log_likelihood_batched(&model, x.view(), 4).unwrap();
        for k in 0..3 {
            let block = log_likelihood(&model, x.slice(s![4 * k..4 * k + 4, ..]), EvalMode::Training).unwrap();
            for i in 0..4 {
                assert!((batched[4 * k + i] - block[i]).abs() <= 1e-12);
            }
        }
        assert!(log_likelihood_batched(&model, x.view(), 5).is_err());
    }

    #[test]
    fn training_mode_rejects_single_row() {
        let model = small_model(true, 41);
        let x = array![[0.1, 0.2, 0.3]];
        assert!(matches!(log_likelihood(&model, x.view(), EvalMode::Training), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = small_model(true, 51);
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        assert!(matches!(
            flow_forward(&model, x.view(), EvalMode::Evaluation),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn bpd_definitions() {
        let v = bpd(&[-3.0 * LN_2, 0.0], 3).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        let std_normal_at_zero = -0.5 * (2.0 * PI).ln();
        let b = bpd(&[std_normal_at_zero], 1).unwrap()[0];
        assert!((b - 1.325748).abs() < 1e-6);
        assert!(bpd(&[0.0], 0).is_err());
    }

    #[test]
    fn mixed_loglik_with_empty_reference_is_training_mode() {
        let mut model = small_model(true, 61);
        perturb(&mut model, 62);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
        let train = log_likelihood(&model, x.view(), EvalMode::Training).unwrap();
        let empty = Array2::<f64>::zeros((0, 3));
        for j in 0..5 {
            assert_eq!(mixed_conditional_loglik(&model, x.view(), empty.view(), j).unwrap(), train[j]);
        }
        assert!(matches!(
            mixed_conditional_loglik(&model, x.view(), empty.view(), 5),
            Err(Error::IndexOutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn mixed_loglik_without_batch_norm_equals_evaluation() {
        let mut model = small_model(false, 71);
        perturb(&mut model, 72);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 * 0.3 + j as f64).sin());
        let r = Array2::from_shape_fn((9, 3), |(i, j)| (i as f64 - 2.0 * j as f64).cos());
        let eval = log_likelihood(&model, x.view(), EvalMode::Evaluation).unwrap();
        for j in 0..4 {
            let m = mixed_conditional_loglik(&model, x.view(), r.view(), j).unwrap();
            assert!((m - eval[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut model = small_model(true, 81);
        perturb(&mut model, 82);
        let text = model.to_json().unwrap();
        let back = FlowModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn constructor_rejects_bad_configs() {
        assert!(FlowModel::new(&FlowConfig { dim: 1, ..Default::default() }, 0).is_err());
        assert!(FlowModel::new(&FlowConfig { n_layers: 1, ..Default::default() }, 0).is_err());
        let m = FlowModel::new(&FlowConfig { dim: 5, n_layers: 2, ..Default::default() }, 0).unwrap();
        assert!(m.covers_all_coordinates());
        assert!(!FlowModel::two_d_example(1.0, 0.0).covers_all_coordinates());
    }
}
