//! Seeded generators for the synthetic densities used in the experiments.
//!
//! Multi-dimensional scenarios put the interesting structure in `x1` and
//! `slab_dims` further coordinates on a slab: `x_k = coupling * x1 + N(0, slab_var)`.

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::flow::{flow_inverse, FlowModel};
use crate::rng::{seeded, Rng};

pub const DEFAULT_SLAB_VAR: f64 = 1e-6;

fn default_sigma() -> f64 {
    0.1
}
fn default_slab_var() -> f64 {
    DEFAULT_SLAB_VAR
}
fn default_trap_std() -> f64 {
    0.01
}
fn default_dim() -> usize {
    2
}
fn default_weight() -> f64 {
    0.5
}
fn default_slab_dims() -> usize {
    1
}
fn default_lo() -> f64 {
    -0.5
}
fn default_hi() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Scenario {
    /// Mixture of `N(-1, sigma^2)` and `N(1, sigma^2)`; `weight` is the
    /// probability of the `+1` component.
    GaussMixture1d {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    /// `x1` from the two-component mixture, the rest on the slab.
    #[serde(rename = "appendix_2d")]
    Appendix2d {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_weight")]
        weight: f64,
        #[serde(default)]
        coupling: f64,
        #[serde(default = "default_slab_var")]
        slab_var: f64,
        #[serde(default = "default_slab_dims")]
        slab_dims: usize,
    },
    /// `x1 ~ Uniform(a, b)`, the rest on the slab.
    UniformQ {
        #[serde(default = "default_lo")]
        a: f64,
        #[serde(default = "default_hi")]
        b: f64,
        #[serde(default)]
        coupling: f64,
        #[serde(default = "default_slab_var")]
        slab_var: f64,
        #[serde(default = "default_slab_dims")]
        slab_dims: usize,
    },
    /// `N(0, std^2 I)` in `dim` coordinates: a tight cluster at the saddle
    /// between the two modes, also sitting on the centre of the slab.
    ModeTrap {
        #[serde(default = "default_trap_std")]
        std: f64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    /// Samples of a saved flow with latents scaled by `temperature`.
    FlowTemperature {
        model: PathBuf,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::GaussMixture1d { .. } => "gauss_mixture_1d",
            Scenario::Appendix2d { .. } => "appendix_2d",
            Scenario::UniformQ { .. } => "uniform_q",
            Scenario::ModeTrap { .. } => "mode_trap",
            Scenario::FlowTemperature { .. } => "flow_temperature",
        }
    }

    /// Scenarios drawn from the training density are labelled in-distribution.
    pub fn default_label(&self) -> Label {
        match self {
            Scenario::GaussMixture1d { .. } | Scenario::Appendix2d { .. } => Label::InDistribution,
            _ => Label::Candidate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let check_slab = |slab_var: f64, coupling: f64, slab_dims: usize| {
            if slab_dims == 0 {
                return bad("slab_dims must be >= 1".into());
            }
            if !(slab_var > 0.0 && slab_var.is_finite()) {
                return bad(format!("slab_var must be > 0, got {slab_var}"));
            }
            if !coupling.is_finite() {
                return bad("coupling must be finite".into());
            }
            Ok(())
        };
        let check_mixture = |sigma: f64, weight: f64| {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return bad(format!("sigma must be > 0, got {sigma}"));
            }
            if !(0.0..=1.0).contains(&weight) {
                return bad(format!("weight must lie in [0, 1], got {weight}"));
            }
            Ok(())
        };
        match *self {
            Scenario::GaussMixture1d { sigma, weight } => check_mixture(sigma, weight)?,
            Scenario::Appendix2d { sigma, weight, coupling, slab_var, slab_dims } => {
                check_mixture(sigma, weight)?;
                check_slab(slab_var, coupling, slab_dims)?;
            }
            Scenario::UniformQ { a, b, coupling, slab_var, slab_dims } => {
                if !(a < b && a.is_finite() && b.is_finite()) {
                    return bad(format!("uniform bounds need a < b, got ({a}, {b})"));
                }
                check_slab(slab_var, coupling, slab_dims)?;
            }
            Scenario::ModeTrap { std, dim } => {
                if !(std > 0.0 && std.is_finite()) {
                    return bad(format!("std must be > 0, got {std}"));
                }
                if dim == 0 {
                    return bad("mode_trap dim must be >= 1".into());
                }
            }
            Scenario::FlowTemperature { temperature, .. } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature must be > 0, got {temperature}"));
                }
            }
        }
        Ok(())
    }
}

/// A scenario with its sample count and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mixture_x1(rng: &mut Rng, sigma: f64, weight: f64) -> f64 {
    let centre = if rng.random::<f64>() < weight { 1.0 } else { -1.0 };
    centre + sigma * normal(rng)
}

fn with_slab(x1: Array1<f64>, coupling: f64, slab_var: f64, slab_dims: usize, rng: &mut Rng) -> Array2<f64> {
    let sd = slab_var.sqrt();
    let mut out = Array2::zeros((x1.len(), 1 + slab_dims));
    for (i, &v) in x1.iter().enumerate() {
        out[[i, 0]] = v;
        for k in 1..=slab_dims {
            out[[i, k]] = coupling * v + sd * normal(rng);
        }
    }
    out
}

/// Draws `spec.n` samples. Pure in `spec` (and, for `flow_temperature`, the
/// model file it names).
pub fn sample(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.scenario.validate()?;
    if spec.n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    let mut rng = seeded(spec.seed);
    let n = spec.n;
    let samples = match spec.scenario {
        Scenario::GaussMixture1d { sigma, weight } => {
            Array2::from_shape_fn((n, 1), |_| mixture_x1(&mut rng, sigma, weight))
        }
        Scenario::Appendix2d { sigma, weight, coupling, slab_var, slab_dims } => {
            let x1 = Array1::from_shape_fn(n, |_| mixture_x1(&mut rng, sigma, weight));
            with_slab(x1, coupling, slab_var, slab_dims, &mut rng)
        }
        Scenario::UniformQ { a, b, coupling, slab_var, slab_dims } => {
            let x1 = Array1::from_shape_fn(n, |_| rng.random_range(a..b));
            with_slab(x1, coupling, slab_var, slab_dims, &mut rng)
        }
        Scenario::ModeTrap { std, dim } => Array2::from_shape_fn((n, dim), |_| std * normal(&mut rng)),
        Scenario::FlowTemperature { ref model, temperature } => {
            let model = FlowModel::load_json(model)?;
            return sample_temperature(&model, n, temperature, spec.seed);
        }
    };
    Dataset::uniform(spec.scenario.name(), samples, spec.scenario.default_label())
}

/// `flow_inverse(T * z)` for `z ~ N(0, I)`, using running statistics.
pub fn sample_temperature(model: &FlowModel, n: usize, temperature: f64, seed: u64) -> Result<Dataset> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    let latents = standard_normal_latents(n, model.dim, seed) * temperature;
    let x = flow_inverse(model, latents.view())?;
    Dataset::uniform("flow_temperature", x, Label::Candidate)
}

/// The latent draws used by [`sample_temperature`] before scaling.
pub fn standard_normal_latents(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_fn((n, dim), |_| normal(&mut rng))
}

/// Maximum-likelihood univariate Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub var: f64,
}

impl GaussianFit {
    pub fn fit(x: ArrayView1<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Empty("cannot fit a Gaussian to no data".into()));
        }
        let mean = x.mean().expect("non-empty");
        let var = x.mapv(|v| (v - mean) * (v - mean)).mean().expect("non-empty");
        if !(var > 0.0) {
            return Err(Error::InvalidParameter("Gaussian fit needs non-constant data".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (2.0 * std::f64::consts::PI * self.var).ln() - d * d / (2.0 * self.var)
    }
}
