//! Maximum-likelihood training in training mode, with running-statistic
//! updates after every step.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::flow::model::check_finite;
use crate::flow::{bpd, log_likelihood, prior_log_density, BatchStats, EvalMode, FlowConfig, FlowModel};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for the evaluation column of the log.
    /// With 0 the whole dataset is used for both.
    pub holdout_fraction: f64,
    /// Log (and evaluate the holdout) every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 2000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            seed: 0,
            holdout_fraction: 0.1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad(format!("bn_momentum must lie in (0, 1), got {}", self.bn_momentum));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub k: usize,
    pub base_seed: u64,
    pub train: TrainConfig,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { k: 5, base_seed: 0, train: TrainConfig::default() }
    }
}

/// Loss (negative mean training-mode log-likelihood), its gradient in
/// [`FlowModel::param_vector`] order, and the batch statistics read.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub stats: Vec<BatchStats>,
}

pub fn loss_and_grad(model: &FlowModel, batch: ArrayView2<f64>) -> Result<LossGrad> {
    if batch.nrows() < 2 {
        return Err(Error::DegenerateBatch(batch.nrows()));
    }
    if batch.ncols() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: batch.ncols() });
    }
    check_finite(batch, "training batch")?;
    let (out, cache) = model.forward_cached(batch, EvalMode::Training)?;
    let n = batch.nrows() as f64;
    let ll = prior_log_density(out.latents.view()) + &out.log_det;
    let loss = -ll.sum() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    // d(-mean ll)/dz = z / n, d(-mean ll)/d log_det = -1 / n
    let grad_z = &out.latents / n;
    let grad_ld = ndarray::Array1::from_elem(batch.nrows(), -1.0 / n);
    let grad = model.backward(&cache, grad_z, &grad_ld);
    Ok(LossGrad { loss, grad, stats: out.stats })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss_nats: f64,
    pub eval_bpd_holdout: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_loss_nats", "eval_bpd_holdout"])?;
        for row in &self.log {
            w.write_record([row.step.to_string(), fmt_f64(row.train_loss_nats), fmt_f64(row.eval_bpd_holdout)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_log_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn mean_eval_bpd(model: &FlowModel, x: ArrayView2<f64>) -> Result<f64> {
    let ll = log_likelihood(model, x, EvalMode::Evaluation)?;
    let b = bpd(ll.as_slice().expect("contiguous"), model.dim)?;
    Ok(b.iter().sum::<f64>() / b.len() as f64)
}

/// Holdout rows are the first `ceil(fraction * n)` of a seeded shuffle.
fn split_holdout(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    if cfg.holdout_fraction == 0.0 {
        return Ok((dataset.clone(), None));
    }
    let n_hold = (cfg.holdout_fraction * dataset.len() as f64).ceil() as usize;
    if n_hold >= dataset.len() {
        return Err(Error::InsufficientPool("holdout would leave no training rows".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut seeded(derive_seed(cfg.seed, &[0x401d])));
    let hold = dataset.select(&idx[..n_hold])?;
    let train = dataset.select(&idx[n_hold..])?;
    Ok((train, Some(hold)))
}

/// Runs `cfg.steps` Adam steps on minibatches drawn by epoch-wise shuffling.
/// The batch-norm momentum of every layer is set to `cfg.bn_momentum`.
pub fn train_mle(model: &FlowModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if dataset.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: dataset.dim() });
    }
    let mut model = model.clone();
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model, log: Vec::new() });
    }
    let (train, holdout) = split_holdout(dataset, cfg)?;
    if train.len() < cfg.batch_size {
        return Err(Error::InsufficientPool(format!(
            "{} training rows for batch size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    model.set_momentum(cfg.bn_momentum);
    let eval_set = holdout.as_ref().unwrap_or(&train);
    let mut rng = seeded(derive_seed(cfg.seed, &[0x7a1e]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut params = model.param_vector();
    let mut adam = Adam::new(params.len(), cfg);
    let mut log = Vec::with_capacity(cfg.steps / cfg.log_every + 1);
    let x = train.samples();
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = x.select(Axis(0), &order[cursor..cursor + cfg.batch_size]);
        cursor += cfg.batch_size;
        let lg = loss_and_grad(&model, batch.view()).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: lg.loss });
        }
        adam.step(&mut params, &lg.grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step, loss: lg.loss });
        }
        model.set_param_vector(&params)?;
        model.update_running_stats(&lg.stats)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let eval = mean_eval_bpd(&model, eval_set.samples()).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { step, loss: lg.loss },
                other => other,
            })?;
            log.push(TrainLogRow { step, train_loss_nats: lg.loss, eval_bpd_holdout: eval });
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Trains `spec.k` models from `FlowModel::new(arch, s)` with training seed `s`
/// for `s = base_seed .. base_seed + k`. Members train in parallel.
pub fn train_ensemble(spec: &EnsembleSpec, arch: &FlowConfig, dataset: &Dataset) -> Result<Vec<FlowModel>> {
    if spec.k == 0 {
        return Err(Error::InvalidParameter("ensemble needs k >= 1".into()));
    }
    (0..spec.k as u64)
        .into_par_iter()
        .map(|i| {
            let seed = spec.base_seed.wrapping_add(i);
            let wrap = |e| Error::EnsembleMember { seed, source: Box::new(e) };
            let init = FlowModel::new(arch, seed).map_err(wrap)?;
            let cfg = TrainConfig { seed, ..spec.train.clone() };
            train_mle(&init, dataset, &cfg).map(|o| o.model).map_err(wrap)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use ndarray::{array, Array2};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut rng));
        Dataset::uniform("normal", x, Label::InDistribution).unwrap()
    }

    #[test]
    fn identity_flow_loss_and_prior_score() {
        let model = FlowModel::identity(2);
        let x = array![[0.5, -1.0], [2.0, 0.25], [-0.3, 0.7]];
        let lg = loss_and_grad(&model, x.view()).unwrap();
        let expect = -prior_log_density(x.view()).mean().unwrap();
        assert!((lg.loss - expect).abs() < 1e-14);
        // zero networks are frozen: no trainable parameters
        assert!(lg.grad.is_empty());
    }

    #[test]
    fn duplicated_rows_give_finite_loss() {
        let cfg = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        let model = FlowModel::new(&cfg, 3).unwrap();
        let x = array![[0.4, 0.1], [0.4, 0.1], [0.4, 0.1]];
        let lg = loss_and_grad(&model, x.view()).unwrap();
        assert!(lg.loss.is_finite());
        assert!(lg.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn zero_steps_returns_model_unchanged() {
        let cfg = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        let model = FlowModel::new(&cfg, 1).unwrap();
        let out =
            train_mle(&model, &gaussian_dataset(100, 2, 2), &TrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let arch = FlowConfig { dim: 2, n_layers: 2, hidden: 8, depth: 1, ..Default::default() };
        let model = FlowModel::new(&arch, 5).unwrap();
        // correlated data the initial flow does not fit
        let base = gaussian_dataset(600, 2, 6);
        let x = base.samples().map_axis(Axis(1), |r| r[0]);
        let mut data = base.samples().to_owned();
        let y = &data.column(1) * 0.3 + &x * 1.5;
        data.column_mut(1).assign(&y);
        let ds = Dataset::uniform("corr", data, Label::InDistribution).unwrap();
        let cfg = TrainConfig { steps: 300, learning_rate: 5e-3, seed: 9, ..Default::default() };
        let a = train_mle(&model, &ds, &cfg).unwrap();
        let b = train_mle(&model, &ds, &cfg).unwrap();
        assert_eq!(a.model.param_vector(), b.model.param_vector());
        assert_eq!(a.model, b.model);
        let first = a.log.first().unwrap().eval_bpd_holdout;
        let last = a.log.last().unwrap().eval_bpd_holdout;
        assert!(last.is_finite() && last < first - 0.1, "{first} -> {last}");
    }

    #[test]
    fn rejects_small_batches_and_pools() {
        let model = FlowModel::identity(2);
        let ds = gaussian_dataset(10, 2, 1);
        let cfg = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(train_mle(&model, &ds, &cfg).is_err());
        let cfg = TrainConfig { batch_size: 64, ..Default::default() };
        assert!(matches!(train_mle(&model, &ds, &cfg), Err(Error::InsufficientPool(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let arch = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        let model = FlowModel::new(&arch, 1).unwrap();
        let mut x = gaussian_dataset(200, 2, 3).samples().to_owned();
        x *= 1e160;
        let ds = Dataset::uniform("huge", x, Label::InDistribution).unwrap();
        let cfg = TrainConfig { steps: 5, holdout_fraction: 0.0, ..Default::default() };
        assert!(matches!(train_mle(&model, &ds, &cfg), Err(Error::Divergence { step: 0, .. })));
    }

    #[test]
    fn ensemble_members_follow_seeds() {
        let arch = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        let ds = gaussian_dataset(200, 2, 4);
        let train = TrainConfig { steps: 20, ..Default::default() };
        let spec = EnsembleSpec { k: 2, base_seed: 7, train: train.clone() };
        let members = train_ensemble(&spec, &arch, &ds).unwrap();
        assert_eq!(members.len(), 2);
        assert_ne!(members[0].param_vector(), members[1].param_vector());
        let single = train_mle(&FlowModel::new(&arch, 7).unwrap(), &ds, &TrainConfig { seed: 7, ..train }).unwrap();
        assert_eq!(members[0], single.model);
        assert_eq!(train_ensemble(&spec, &arch, &ds).unwrap(), members);
    }

    #[test]
    fn running_means_track_standard_normal_data() {
        let arch = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        let model = FlowModel::new(&arch, 11).unwrap();
        let ds = gaussian_dataset(4000, 2, 12);
        // a tiny learning rate keeps the normalized features (nearly) fixed
        let cfg = TrainConfig {
            steps: 400,
            learning_rate: 1e-9,
            holdout_fraction: 0.0,
            log_every: 400,
            ..Default::default()
        };
        let trained = train_mle(&model, &ds, &cfg).unwrap().model;
        // first-layer pre-activations of layer 0's scale network are linear in x
        let w = &model.layers[0].s_net.layers[0].weight;
        let pass = ds.samples().select(Axis(1), &[0]);
        let pre = pass.dot(&w.t());
        let true_mean = pre.mean_axis(Axis(0)).unwrap();
        let true_sd = pre.std_axis(Axis(0), 1.0);
        let bn = trained.layers[0].s_net.layers[0].norm.as_ref().unwrap();
        let m = cfg.bn_momentum;
        for j in 0..true_mean.len() {
            // stationary standard deviation of an EMA of batch means
            let se = true_sd[j] * (m / ((2.0 - m) * cfg.batch_size as f64)).sqrt();
            let diff = (bn.running_mean[j] - true_mean[j]).abs();
            assert!(diff <= 3.0 * se, "{diff} vs 3 * {se}");
        }
    }
}
