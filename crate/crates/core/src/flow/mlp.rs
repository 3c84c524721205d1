//! Small fully connected networks used as the scale and shift functions of a
//! coupling layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{batchnorm_backward, BatchNormCache, BatchNormState, BatchStats, EvalMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// `activation(batchnorm(x W^T + b))`, with the batch norm optional.
///
/// A frozen layer keeps its weight and bias fixed during training; its batch
/// norm parameters (if any) stay trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNormState>,
    pub activation: Activation,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseCache {
    input: Array2<f64>,
    norm: Option<BatchNormCache>,
    output: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        norm: Option<BatchNormState>,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..=bound));
        Self { weight, bias: Array1::zeros(output), norm, activation, frozen: false }
    }

    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_params(&self) -> usize {
        let linear = if self.frozen { 0 } else { self.weight.len() + self.bias.len() };
        linear + self.norm.as_ref().map_or(0, |bn| 2 * bn.width())
    }

    fn forward_cached(
        &self,
        input: ArrayView2<f64>,
        mode: EvalMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Array2<f64>, DenseCache)> {
        let mut pre = input.dot(&self.weight.t());
        pre += &self.bias;
        let norm = match &self.norm {
            Some(bn) => {
                let (out, used, cache) = bn.forward_cached(pre.view(), mode)?;
                pre = out;
                stats.push(used);
                Some(cache)
            }
            None => None,
        };
        if self.activation == Activation::Tanh {
            pre.mapv_inplace(f64::tanh);
        }
        let cache = DenseCache { input: input.to_owned(), norm, output: pre.clone() };
        Ok((pre, cache))
    }

    fn apply(&self, input: ArrayView2<f64>, group: Option<usize>) -> Array2<f64> {
        let mut pre = input.dot(&self.weight.t());
        pre += &self.bias;
        if let Some(bn) = &self.norm {
            bn.normalize_in_place(&mut pre, group);
        }
        if self.activation == Activation::Tanh {
            pre.mapv_inplace(f64::tanh);
        }
        pre
    }

    /// Writes this layer's parameter gradients into `grad` (length
    /// `n_params()`) and returns the gradient w.r.t. the layer input.
    fn backward(&self, cache: &DenseCache, grad_out: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let mut g = grad_out;
        if self.activation == Activation::Tanh {
            g.zip_mut_with(&cache.output, |g, &y| *g *= 1.0 - y * y);
        }
        let mut offset = if self.frozen { 0 } else { self.weight.len() + self.bias.len() };
        if let (Some(bn), Some(bn_cache)) = (&self.norm, &cache.norm) {
            let (g_in, g_gamma, g_beta) = batchnorm_backward(bn, bn_cache, &g);
            let w = bn.width();
            grad[offset..offset + w].copy_from_slice(g_gamma.as_slice().unwrap());
            grad[offset + w..offset + 2 * w].copy_from_slice(g_beta.as_slice().unwrap());
            offset += 2 * w;
            g = g_in;
        }
        debug_assert_eq!(offset, grad.len());
        if !self.frozen {
            let g_w = g.t().dot(&cache.input);
            let g_b = g.sum_axis(Axis(0));
            let nw = self.weight.len();
            for (dst, src) in grad[..nw].iter_mut().zip(g_w.iter()) {
                *dst = *src;
            }
            grad[nw..nw + g_b.len()].copy_from_slice(g_b.as_slice().unwrap());
        }
        g.dot(&self.weight)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        if !self.frozen {
            out.extend(self.weight.iter());
            out.extend(self.bias.iter());
        }
        if let Some(bn) = &self.norm {
            out.extend(bn.gamma.iter());
            out.extend(bn.beta.iter());
        }
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        fn take(dst: &mut [f64], src: &mut &[f64]) {
            let (head, tail) = src.split_at(dst.len());
            dst.copy_from_slice(head);
            *src = tail;
        }
        if !self.frozen {
            for w in self.weight.iter_mut() {
                *w = src[0];
                *src = &src[1..];
            }
            take(self.bias.as_slice_mut().unwrap(), src);
        }
        if let Some(bn) = &mut self.norm {
            take(bn.gamma.as_slice_mut().unwrap(), src);
            take(bn.beta.as_slice_mut().unwrap(), src);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpCache {
    layers: Vec<DenseCache>,
}

impl Mlp {
    /// `depth` hidden tanh layers of width `hidden` (batch-normalized before
    /// the activation when `batch_norm` is set) followed by a linear output.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        batch_norm: bool,
        eps: f64,
        momentum: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = input;
        for _ in 0..depth {
            let norm = batch_norm.then(|| BatchNormState::with_params(hidden, eps, momentum));
            layers.push(Dense::new(width, hidden, norm, Activation::Tanh, rng));
            width = hidden;
        }
        layers.push(Dense::new(width, output, None, Activation::Identity, rng));
        Self { layers }
    }

    /// A single frozen linear map with all-zero weights: outputs 0 everywhere.
    pub fn zero(input: usize, output: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: Array2::zeros((output, input)),
                bias: Array1::zeros(output),
                norm: None,
                activation: Activation::Identity,
                frozen: true,
            }],
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_width)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.norm.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidParameter("mlp has no layers".into()));
        };
        if last.activation != Activation::Identity || last.norm.is_some() {
            return Err(Error::InvalidParameter("mlp output layer must be linear without batch norm".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::DimensionMismatch { expected: pair[0].output_width(), got: pair[1].input_width() });
            }
        }
        for layer in &self.layers {
            if layer.bias.len() != layer.output_width() {
                return Err(Error::DimensionMismatch { expected: layer.output_width(), got: layer.bias.len() });
            }
            if let Some(bn) = &layer.norm {
                bn.validate()?;
                if bn.width() != layer.output_width() {
                    return Err(Error::DimensionMismatch { expected: layer.output_width(), got: bn.width() });
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: ArrayView2<f64>, mode: EvalMode) -> Result<Array2<f64>> {
        let mut stats = Vec::new();
        self.forward_cached(input, mode, &mut stats).map(|(out, _)| out)
    }

    /// Cache-free forward; see [`BatchNormState::normalize_in_place`] for `group`.
    pub(crate) fn apply(&self, input: ArrayView2<f64>, group: Option<usize>) -> Array2<f64> {
        let mut h = self.layers[0].apply(input, group);
        for layer in &self.layers[1..] {
            h = layer.apply(h.view(), group);
        }
        h
    }

    pub(crate) fn forward_cached(
        &self,
        input: ArrayView2<f64>,
        mode: EvalMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Array2<f64>, MlpCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = input.to_owned();
        for layer in &self.layers {
            let (out, cache) = layer.forward_cached(h.view(), mode, stats)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, MlpCache { layers: caches }))
    }

    pub(crate) fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len() + 1);
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.n_params();
        }
        offsets.push(acc);
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&cache.layers[i], g, &mut grad[offsets[i]..offsets[i + 1]]);
        }
        g
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            layer.write_params(out);
        }
    }

    pub(crate) fn read_params(&mut self, src: &mut &[f64]) {
        for layer in &mut self.layers {
            layer.read_params(src);
        }
    }

    pub(crate) fn norms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.layers.iter().filter_map(|l| l.norm.as_ref())
    }

    pub(crate) fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.layers.iter_mut().filter_map(|l| l.norm.as_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn zero_mlp_outputs_zero() {
        let net = Mlp::zero(2, 3);
        let out = net.forward(array![[1.0, -4.0], [2.0, 9.0]].view(), EvalMode::Evaluation).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((2, 3)));
        assert_eq!(net.n_params(), 0);
    }

    #[test]
    fn params_round_trip() {
        let mut rng = seeded(3);
        let mut net = Mlp::new(2, 4, 2, 1, true, 1e-5, 0.1, &mut rng);
        net.validate().unwrap();
        let mut p = Vec::new();
        net.write_params(&mut p);
        assert_eq!(p.len(), net.n_params());
        let shifted: Vec<f64> = p.iter().map(|v| v + 0.5).collect();
        net.read_params(&mut shifted.as_slice());
        let mut q = Vec::new();
        net.write_params(&mut q);
        assert_eq!(q, shifted);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = seeded(4);
        let net = Mlp::new(4, 8, 1, 2, false, 1e-5, 0.1, &mut rng);
        assert!(net.layers[0].weight.iter().all(|w| w.abs() <= 0.5));
        assert!(net.layers[1].weight.iter().all(|w| w.abs() <= 1.0 / 8f64.sqrt()));
        assert!(net.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn rejects_normalized_output_layer() {
        let mut rng = seeded(5);
        let mut net = Mlp::new(1, 3, 1, 1, true, 1e-5, 0.1, &mut rng);
        net.layers[1].norm = Some(BatchNormState::new(1));
        assert!(net.validate().is_err());
    }
}
