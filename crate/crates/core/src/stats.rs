//! Out-of-distribution test statistics.
//!
//! Besides the per-sample likelihood scores (raw likelihood, the two-tailed
//! likelihood rank and WAIC) this module implements the mixed-batch family:
//! a sample's training-mode likelihood is evaluated in batches where a
//! fraction `r` of the slots hold samples like it and the rest hold training
//! samples. `S_r` averages that likelihood over random batch compositions,
//! `delta = |S_r1 - S_r2|` measures how much the likelihood moves with the
//! batch composition, and the rank statistic compares `delta` to its values
//! on held-out in-distribution samples.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, Label};
use crate::error::{Error, Result};
use crate::flow::{log_likelihood, log_likelihood_batched, EvalMode, FlowModel};
use crate::metrics::{roc_auc, DetectionReport};
use crate::rng::{derive_seed, seeded};
use crate::synth::sample_temperature;

/// Seed-stream tags keep the Monte Carlo draws of different callers apart.
pub mod stream {
    pub const REFERENCE: u64 = 1;
    pub const TEST: u64 = 2;
    pub const SWEEP: u64 = 3;
}

/// Which pool fills the remaining test slots when scoring the reference set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompanionPolicy {
    /// Every scored sample shares its batch with samples of its own set:
    /// reference samples with other reference samples, test samples with
    /// other test samples.
    #[default]
    OwnPool,
    /// Reference samples share their batch with test samples.
    TestPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatisticConfig {
    pub b: usize,
    pub r1: f64,
    pub r2: f64,
    pub mc_reps: usize,
    pub seed: u64,
    pub companions: CompanionPolicy,
}

impl Default for StatisticConfig {
    fn default() -> Self {
        Self { b: 64, r1: 0.1, r2: 0.9, mc_reps: 8, seed: 0, companions: CompanionPolicy::OwnPool }
    }
}

impl StatisticConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.r1)?;
        check_ratio(self.r2)?;
        if !(self.r1 < self.r2) {
            return Err(Error::InvalidParameter(format!("need r1 < r2, got {} and {}", self.r1, self.r2)));
        }
        if self.b < 2 {
            return Err(Error::InvalidParameter(format!("batch size b must be >= 2, got {}", self.b)));
        }
        if floor_slots(self.r1, self.b) < 1 {
            return Err(Error::InvalidParameter(format!("r1 * b = {} leaves no test slot", self.r1 * self.b as f64)));
        }
        if self.mc_reps == 0 {
            return Err(Error::InvalidParameter("mc_reps must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("ratio must lie in (0, 1], got {r}")))
    }
}

/// `floor(r * b)`, robust to `r * b` landing just below an integer.
fn floor_slots(r: f64, b: usize) -> usize {
    (r * b as f64 + 1e-9).floor() as usize
}

/// Companion counts for a scored sample in a batch of `b` at ratio `r`:
/// `n_q = max(floor(r b) - 1, 0)` further test-pool samples and
/// `n_p = b - 1 - n_q` training samples.
pub fn slot_counts(b: usize, r: f64) -> (usize, usize) {
    let n_q = floor_slots(r, b).saturating_sub(1).min(b - 1);
    (n_q, b - 1 - n_q)
}

/// A sample to score and its row in either pool, which is then excluded from
/// the companion draws.
#[derive(Debug, Clone, Copy)]
pub struct MixTarget<'a> {
    pub x: ArrayView1<'a, f64>,
    pub q_index: Option<usize>,
    pub p_index: Option<usize>,
}

impl<'a> MixTarget<'a> {
    pub fn new(x: ArrayView1<'a, f64>) -> Self {
        Self { x, q_index: None, p_index: None }
    }
}

/// Training samples fill the `p` slots, the test pool fills the other test
/// slots.
#[derive(Debug, Clone, Copy)]
pub struct MixPools<'a> {
    pub p_pool: ArrayView2<'a, f64>,
    pub q_pool: ArrayView2<'a, f64>,
}

fn draw_excluding(rng: &mut crate::rng::Rng, len: usize, exclude: Option<usize>, amount: usize) -> Vec<usize> {
    let avail = len - exclude.map_or(0, |_| 1);
    index::sample(rng, avail, amount)
        .into_iter()
        .map(|i| match exclude {
            Some(e) if i >= e => i + 1,
            _ => i,
        })
        .collect()
}

/// Training-mode log-likelihood of `target` for every ratio and replicate,
/// indexed `[ratio][rep]`. Replicate `k` draws one ordering of companions
/// from each pool (seed `derive_seed(seed, [k])`) and every ratio uses a
/// prefix of it, so the ratios are compared on common random numbers.
pub fn mixed_logliks(
    model: &FlowModel,
    target: &MixTarget,
    pools: &MixPools,
    ratios: &[f64],
    b: usize,
    mc_reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if b < 2 {
        return Err(Error::DegenerateBatch(b));
    }
    if mc_reps == 0 {
        return Err(Error::InvalidParameter("mc_reps must be >= 1".into()));
    }
    let dim = model.dim;
    if target.x.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: target.x.len() });
    }
    for r in ratios {
        check_ratio(*r)?;
    }
    let counts: Vec<(usize, usize)> = ratios.iter().map(|&r| slot_counts(b, r)).collect();
    let max_q = counts.iter().map(|c| c.0).max().unwrap_or(0);
    let max_p = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let avail_q = target.q_index.map_or(pools.q_pool.nrows(), |_| pools.q_pool.nrows().saturating_sub(1));
    let avail_p = target.p_index.map_or(pools.p_pool.nrows(), |_| pools.p_pool.nrows().saturating_sub(1));
    if max_q > avail_q || max_p > avail_p {
        return Err(Error::InsufficientPool(format!(
            "need {max_q} test-pool and {max_p} training companions, have {avail_q} and {avail_p}"
        )));
    }
    for pool in [pools.p_pool, pools.q_pool] {
        if pool.nrows() > 0 && pool.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: pool.ncols() });
        }
    }
    let mut x = Array2::zeros((ratios.len() * mc_reps * b, dim));
    for rep in 0..mc_reps {
        let mut rng = seeded(derive_seed(seed, &[rep as u64]));
        let q_idx = draw_excluding(&mut rng, pools.q_pool.nrows(), target.q_index, max_q);
        let p_idx = draw_excluding(&mut rng, pools.p_pool.nrows(), target.p_index, max_p);
        for (ri, &(n_q, n_p)) in counts.iter().enumerate() {
            let start = (ri * mc_reps + rep) * b;
            let mut rows = x.slice_mut(ndarray::s![start..start + b, ..]);
            rows.row_mut(0).assign(&target.x);
            for (k, &i) in q_idx[..n_q].iter().enumerate() {
                rows.row_mut(1 + k).assign(&pools.q_pool.row(i));
            }
            for (k, &i) in p_idx[..n_p].iter().enumerate() {
                rows.row_mut(1 + n_q + k).assign(&pools.p_pool.row(i));
            }
        }
    }
    let ll = log_likelihood_batched(model, x.view(), b)?;
    Ok((0..ratios.len()).map(|ri| (0..mc_reps).map(|rep| ll[(ri * mc_reps + rep) * b]).collect()).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Monte Carlo estimate of the expected training-mode log-likelihood of the
/// target at ratio `r`. `seed` should already identify the sample (see
/// [`sample_seed`]).
pub fn stat_s(
    model: &FlowModel,
    target: &MixTarget,
    pools: &MixPools,
    r: f64,
    cfg: &StatisticConfig,
    seed: u64,
) -> Result<f64> {
    let ll = mixed_logliks(model, target, pools, &[r], cfg.b, cfg.mc_reps, seed)?;
    Ok(mean(&ll[0]))
}

/// `|S_r1 - S_r2|` with both ratios evaluated on the same companion draws.
pub fn stat_delta(
    model: &FlowModel,
    target: &MixTarget,
    pools: &MixPools,
    cfg: &StatisticConfig,
    seed: u64,
) -> Result<f64> {
    let ll = mixed_logliks(model, target, pools, &[cfg.r1, cfg.r2], cfg.b, cfg.mc_reps, seed)?;
    Ok((mean(&ll[0]) - mean(&ll[1])).abs())
}

/// Seed for sample `index` of a scoring `stream`.
pub fn sample_seed(cfg: &StatisticConfig, stream: u64, index: usize) -> u64 {
    derive_seed(cfg.seed, &[stream, index as u64])
}

/// `delta` for every row of `set`. Without `q_pool` each row's remaining test
/// slots are filled from `set` itself (excluding the row); with it, from
/// `q_pool`.
pub fn delta_scores(
    model: &FlowModel,
    set: ArrayView2<f64>,
    p_pool: ArrayView2<f64>,
    q_pool: Option<ArrayView2<f64>>,
    cfg: &StatisticConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    delta_scores_from(model, set, p_pool, q_pool, cfg, stream, 0)
}

/// As [`delta_scores`], numbering the rows from `first_index` when deriving
/// their seeds.
fn delta_scores_from(
    model: &FlowModel,
    set: ArrayView2<f64>,
    p_pool: ArrayView2<f64>,
    q_pool: Option<ArrayView2<f64>>,
    cfg: &StatisticConfig,
    stream: u64,
    first_index: usize,
) -> Result<Vec<f64>> {
    (0..set.nrows())
        .into_par_iter()
        .map(|i| {
            let target = MixTarget { x: set.row(i), q_index: q_pool.is_none().then_some(i), p_index: None };
            let pools = MixPools { p_pool, q_pool: q_pool.unwrap_or(set) };
            stat_delta(model, &target, &pools, cfg, sample_seed(cfg, stream, first_index + i))
        })
        .collect()
}

/// Reference `delta` values of held-out in-distribution samples, following
/// `cfg.companions`. `test_set` is only read under [`CompanionPolicy::TestPool`].
pub fn reference_deltas(
    model: &FlowModel,
    reference: ArrayView2<f64>,
    p_pool: ArrayView2<f64>,
    test_set: ArrayView2<f64>,
    cfg: &StatisticConfig,
) -> Result<Vec<f64>> {
    let q = match cfg.companions {
        CompanionPolicy::OwnPool => None,
        CompanionPolicy::TestPool => Some(test_set),
    };
    delta_scores(model, reference, p_pool, q, cfg, stream::REFERENCE)
}

/// Number of reference values `<=` `delta_x`.
pub fn stat_t_rank(delta_x: f64, train_deltas: &[f64]) -> Result<usize> {
    if train_deltas.is_empty() {
        return Err(Error::Empty("rank statistic needs reference values".into()));
    }
    Ok(train_deltas.iter().filter(|&&d| d <= delta_x).count())
}

/// [`stat_t_rank`] for many values at once.
pub fn rank_scores(deltas: &[f64], train_deltas: &[f64]) -> Result<Vec<f64>> {
    if train_deltas.is_empty() {
        return Err(Error::Empty("rank statistic needs reference values".into()));
    }
    let mut sorted = train_deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(deltas.iter().map(|&d| sorted.partition_point(|&t| t <= d) as f64).collect())
}

/// Negative evaluation-mode log-likelihood (higher means more atypical).
pub fn stat_loglik(model: &FlowModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(log_likelihood(model, x, EvalMode::Evaluation)?.iter().map(|v| -v).collect())
}

/// `|#{train <= x} - N/2|` for a reference sorted ascending.
pub fn stat_perm(loglik_x: f64, sorted_train_logliks: &[f64]) -> Result<f64> {
    if sorted_train_logliks.is_empty() {
        return Err(Error::Empty("permutation statistic needs reference log-likelihoods".into()));
    }
    if sorted_train_logliks.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParameter("reference log-likelihoods must be sorted ascending".into()));
    }
    let count = sorted_train_logliks.partition_point(|&t| t <= loglik_x);
    Ok((count as f64 - sorted_train_logliks.len() as f64 / 2.0).abs())
}

/// [`stat_perm`] for every row of `x` against the evaluation-mode
/// log-likelihoods of `reference`.
pub fn perm_scores(model: &FlowModel, x: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<Vec<f64>> {
    let mut train = log_likelihood(model, reference, EvalMode::Evaluation)?.to_vec();
    train.sort_by(f64::total_cmp);
    log_likelihood(model, x, EvalMode::Evaluation)?.iter().map(|&ll| stat_perm(ll, &train)).collect()
}

/// `-mean + population variance` of the members' evaluation-mode
/// log-likelihoods, per row of `x`.
pub fn stat_waic(ensemble: &[FlowModel], x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Err(Error::Empty("WAIC needs at least one ensemble member".into()));
    }
    let lls = ensemble.iter().map(|m| log_likelihood(m, x, EvalMode::Evaluation)).collect::<Result<Vec<_>>>()?;
    let k = ensemble.len() as f64;
    Ok((0..x.nrows())
        .map(|i| {
            let m = lls.iter().map(|ll| ll[i]).sum::<f64>() / k;
            let var = lls.iter().map(|ll| (ll[i] - m) * (ll[i] - m)).sum::<f64>() / k;
            -m + var
        })
        .collect())
}

/// Everything the detection statistics are computed from, apart from the
/// samples being scored.
#[derive(Debug, Clone, Copy)]
pub struct DetectSetup<'a> {
    pub model: &'a FlowModel,
    /// WAIC members; WAIC is skipped when empty.
    pub ensemble: &'a [FlowModel],
    /// Pool of in-distribution batch companions (the training set).
    pub train: ArrayView2<'a, f64>,
    /// Held-out in-distribution samples that calibrate the rank statistics.
    pub reference: ArrayView2<'a, f64>,
    pub cfg: &'a StatisticConfig,
}

pub const STAT_LOGLIK: &str = "loglik";
pub const STAT_PERM: &str = "perm";
pub const STAT_WAIC: &str = "waic";
pub const STAT_RANK: &str = "rank";

/// Per-row scores of one sample set under every statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct SetScores {
    pub loglik: Vec<f64>,
    pub perm: Vec<f64>,
    /// Empty when the setup has no ensemble.
    pub waic: Vec<f64>,
    pub rank: Vec<f64>,
}

impl SetScores {
    fn named(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![(STAT_LOGLIK, self.loglik.as_slice()), (STAT_PERM, self.perm.as_slice())];
        if !self.waic.is_empty() {
            out.push((STAT_WAIC, self.waic.as_slice()));
        }
        out.push((STAT_RANK, self.rank.as_slice()));
        out
    }
}

/// Scores in-distribution `negatives` and each candidate set, then reports
/// every statistic for each (negatives, candidate) pair against the rows'
/// own labels. The mixed-batch companions of a row come from the set it
/// belongs to, so each set should hold samples of a single origin.
pub fn detect(setup: &DetectSetup, negatives: &Dataset, candidates: &[&Dataset]) -> Result<Vec<Vec<DetectionReport>>> {
    setup.cfg.validate()?;
    let dim = setup.model.dim;
    let dims =
        candidates.iter().map(|s| s.dim()).chain([negatives.dim(), setup.train.ncols(), setup.reference.ncols()]);
    for d in dims {
        if d != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: d });
        }
    }
    let all_test =
        candidates.iter().try_fold(negatives.samples().to_owned(), |acc, s| stack(acc.view(), s.samples()))?;
    let ref_deltas = reference_deltas(setup.model, setup.reference, setup.train, all_test.view(), setup.cfg)?;
    let mut sorted_ref_ll = log_likelihood(setup.model, setup.reference, EvalMode::Evaluation)?.to_vec();
    sorted_ref_ll.sort_by(f64::total_cmp);

    let mut first_index = 0;
    let mut score = |set: &Dataset| -> Result<SetScores> {
        let ll = log_likelihood(setup.model, set.samples(), EvalMode::Evaluation)?;
        let perm = ll.iter().map(|&v| stat_perm(v, &sorted_ref_ll)).collect::<Result<_>>()?;
        let waic = if setup.ensemble.is_empty() { Vec::new() } else { stat_waic(setup.ensemble, set.samples())? };
        let deltas =
            delta_scores_from(setup.model, set.samples(), setup.train, None, setup.cfg, stream::TEST, first_index)?;
        first_index += set.len();
        Ok(SetScores { loglik: ll.iter().map(|v| -v).collect(), perm, waic, rank: rank_scores(&deltas, &ref_deltas)? })
    };
    let neg = score(negatives)?;
    let mut reports = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let pos = score(cand)?;
        let labels: Vec<Label> = negatives.labels().iter().chain(cand.labels()).copied().collect();
        let pair = neg
            .named()
            .into_iter()
            .zip(pos.named())
            .map(|((name, a), (_, b))| DetectionReport::from_scores(name, [a, b].concat(), labels.clone()))
            .collect::<Result<Vec<_>>>()?;
        reports.push(pair);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub mean_bpd: f64,
    pub stderr: f64,
}

/// Mean (and standard error) over `test_set` of the mixed-batch BPD at each
/// ratio; each sample's other test slots come from `test_set`.
pub fn sweep_ratio(
    model: &FlowModel,
    test_set: ArrayView2<f64>,
    train_set: ArrayView2<f64>,
    ratios: &[f64],
    cfg: &StatisticConfig,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::Empty("no ratios to sweep".into()));
    }
    if test_set.nrows() == 0 {
        return Err(Error::Empty("empty test set".into()));
    }
    let denom = model.dim as f64 * std::f64::consts::LN_2;
    let per_sample: Vec<Vec<f64>> = (0..test_set.nrows())
        .into_par_iter()
        .map(|i| {
            let target = MixTarget { x: test_set.row(i), q_index: Some(i), p_index: None };
            let pools = MixPools { p_pool: train_set, q_pool: test_set };
            let ll =
                mixed_logliks(model, &target, &pools, ratios, cfg.b, cfg.mc_reps, sample_seed(cfg, stream::SWEEP, i))?;
            Ok(ll.iter().map(|reps| -mean(reps) / denom).collect())
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    Ok(ratios
        .iter()
        .enumerate()
        .map(|(ri, &ratio)| {
            let vals: Vec<f64> = per_sample.iter().map(|v| v[ri]).collect();
            let m = mean(&vals);
            let stderr = if vals.len() > 1 {
                (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            SweepRow { ratio, mean_bpd: m, stderr }
        })
        .collect())
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ratio", "mean_bpd", "stderr"])?;
    for r in rows {
        w.write_record([fmt_f64(r.ratio), fmt_f64(r.mean_bpd), fmt_f64(r.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub tol_bpd: f64,
    pub max_iter: usize,
    /// Points of the coarse grid used to check monotonicity.
    pub grid: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { t_lo: 0.2, t_hi: 3.0, n_samples: 500, seed: 0, tol_bpd: 0.05, max_iter: 30, grid: 9 }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub tuned_t: f64,
    pub median_gap_bpd: f64,
    pub fooled_auc: f64,
    pub samples: Dataset,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_bpd(model: &FlowModel, x: ArrayView2<f64>) -> Result<f64> {
    let ll = log_likelihood(model, x, EvalMode::Evaluation)?;
    let mut b = crate::flow::bpd(ll.as_slice().expect("contiguous"), model.dim)?;
    Ok(median(&mut b))
}

/// Finds the temperature at which `q_model`'s samples have the same median
/// evaluation-mode BPD under `p_model` as `target`. Every temperature reuses
/// the same latent draws. `fooled_auc` is the AUC of the likelihood-rank
/// statistic (against `reference`) separating the tuned samples from `target`.
pub fn attack_tune_temperature(
    p_model: &FlowModel,
    q_model: &FlowModel,
    target: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    if !(cfg.t_lo > 0.0 && cfg.t_lo < cfg.t_hi && cfg.t_hi.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid temperature bracket ({}, {})", cfg.t_lo, cfg.t_hi)));
    }
    if cfg.grid < 2 || cfg.n_samples == 0 || !(cfg.tol_bpd > 0.0) {
        return Err(Error::InvalidParameter("attack needs grid >= 2, n_samples >= 1 and tol_bpd > 0".into()));
    }
    if q_model.dim != p_model.dim {
        return Err(Error::DimensionMismatch { expected: p_model.dim, got: q_model.dim });
    }
    let target_median = median_bpd(p_model, target)?;
    let gap = |t: f64| -> Result<f64> {
        let s = sample_temperature(q_model, cfg.n_samples, t, cfg.seed)?;
        Ok(median_bpd(p_model, s.samples())? - target_median)
    };
    let grid: Vec<f64> =
        (0..cfg.grid).map(|i| cfg.t_lo + (cfg.t_hi - cfg.t_lo) * i as f64 / (cfg.grid - 1) as f64).collect();
    let gaps = grid.iter().map(|&t| gap(t)).collect::<Result<Vec<_>>>()?;
    let rising = gaps.windows(2).all(|w| w[1] >= w[0]);
    let falling = gaps.windows(2).all(|w| w[1] <= w[0]);
    if !rising && !falling {
        return Err(Error::NonMonotone(format!("median BPD gap over the bracket: {gaps:?}")));
    }
    let mut best = (grid[0], gaps[0]);
    for (&t, &g) in grid.iter().zip(&gaps) {
        if g.abs() < best.1.abs() {
            best = (t, g);
        }
    }
    if let Some(cell) = gaps.windows(2).position(|w| w[0].signum() != w[1].signum() || w[0] == 0.0) {
        let (mut lo, mut hi) = (grid[cell], grid[cell + 1]);
        let mut g_lo = gaps[cell];
        for _ in 0..cfg.max_iter {
            if best.1.abs() <= cfg.tol_bpd {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let g = gap(mid)?;
            if g.abs() < best.1.abs() {
                best = (mid, g);
            }
            if (g < 0.0) == (g_lo < 0.0) {
                lo = mid;
                g_lo = g;
            } else {
                hi = mid;
            }
        }
    }
    let samples = sample_temperature(q_model, cfg.n_samples, best.0, cfg.seed)?;
    let mut scores = perm_scores(p_model, target, reference)?;
    scores.extend(perm_scores(p_model, samples.samples(), reference)?);
    let mut labels = vec![Label::InDistribution; target.nrows()];
    labels.extend(std::iter::repeat_n(Label::Candidate, samples.len()));
    let fooled_auc = roc_auc(&scores, &labels)?;
    Ok(AttackResult { tuned_t: best.0, median_gap_bpd: best.1, fooled_auc, samples })
}

/// Row-wise concatenation helper for callers assembling scored sets.
pub fn stack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(0), &[a, b]).map_err(|_| Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::synth::standard_normal_latents;
    use ndarray::{array, Array1};

    fn bn_model(seed: u64) -> FlowModel {
        let cfg = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, ..Default::default() };
        FlowModel::new(&cfg, seed).unwrap()
    }

    fn no_bn_model(seed: u64) -> FlowModel {
        let cfg = FlowConfig { dim: 2, n_layers: 2, hidden: 4, depth: 1, batch_norm: false, ..Default::default() };
        FlowModel::new(&cfg, seed).unwrap()
    }

    #[test]
    fn slot_arithmetic() {
        assert_eq!(slot_counts(64, 0.1), (5, 58));
        assert_eq!(slot_counts(64, 0.9), (56, 7));
        assert_eq!(slot_counts(64, 1.0), (63, 0));
        assert_eq!(slot_counts(10, 0.05), (0, 9));
        // 0.3 * 10 evaluates to 3.0000000000000004 and 0.7 * 10 to 7.000000000000001
        assert_eq!(slot_counts(10, 0.3), (2, 7));
        assert_eq!(slot_counts(100, 0.29), (28, 71));
    }

    #[test]
    fn perm_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(stat_perm(2.5, &t).unwrap(), 0.0);
        assert_eq!(stat_perm(5.0, &t).unwrap(), 2.0);
        assert_eq!(stat_perm(0.0, &t).unwrap(), 2.0);
        assert!(stat_perm(0.0, &[]).is_err());
        assert!(stat_perm(0.0, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(stat_t_rank(0.5, &[1.0, 2.0, 3.0]).unwrap(), 0);
        assert_eq!(stat_t_rank(9.0, &[1.0, 2.0, 3.0]).unwrap(), 3);
        assert_eq!(stat_t_rank(2.0, &[1.0, 2.0, 3.0]).unwrap(), 2);
        assert!(stat_t_rank(1.0, &[]).is_err());
        assert_eq!(rank_scores(&[0.5, 9.0, 2.0], &[3.0, 1.0, 2.0]).unwrap(), vec![0.0, 3.0, 2.0]);
    }

    #[test]
    fn waic_examples() {
        let x = array![[0.3, -0.2], [1.0, 2.0]];
        let m = bn_model(1);
        let ll = log_likelihood(&m, x.view(), EvalMode::Evaluation).unwrap();
        let single = stat_waic(std::slice::from_ref(&m), x.view()).unwrap();
        assert_eq!(single, ll.iter().map(|v| -v).collect::<Vec<_>>());
        let dup = stat_waic(&[m.clone(), m.clone(), m.clone()], x.view()).unwrap();
        for (a, b) in dup.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(stat_waic(&[], x.view()).is_err());
    }

    #[test]
    fn waic_mean_and_population_variance() {
        // identity flows whose second coordinate is shifted by 0 and 2: at the
        // origin their logliks are L and L - 2, so WAIC = -(L - 1) + 1
        let shifted = |shift: f64| {
            let mut m = FlowModel::identity(2);
            m.layers[0].t_net.layers[0].bias[0] = shift;
            m
        };
        let x = array![[0.0, 0.0]];
        let l = -(2.0 * std::f64::consts::PI).ln();
        let w = stat_waic(&[shifted(0.0), shifted(2.0)], x.view()).unwrap()[0];
        assert!((w - (-(l - 1.0) + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn loglik_score_is_gaussian_monotone() {
        let m = FlowModel::identity(2);
        let s = stat_loglik(&m, array![[0.0, 0.0], [3.0, 4.0]].view()).unwrap();
        assert!(s[0] < s[1]);
        assert_eq!(s, stat_loglik(&m, array![[0.0, 0.0], [3.0, 4.0]].view()).unwrap());
    }

    fn pools() -> (Array2<f64>, Array2<f64>) {
        let p = standard_normal_latents(200, 2, 1);
        let q = standard_normal_latents(100, 2, 2) * 0.3 + 2.0;
        (p, q)
    }

    #[test]
    fn single_replicate_is_one_mixed_batch() {
        let m = bn_model(3);
        let (p, q) = pools();
        let cfg = StatisticConfig { mc_reps: 1, b: 10, ..Default::default() };
        let target = MixTarget { x: q.row(0), q_index: Some(0), p_index: None };
        let pools = MixPools { p_pool: p.view(), q_pool: q.view() };
        let s = stat_s(&m, &target, &pools, 0.5, &cfg, 77).unwrap();
        // rebuild the batch by hand
        let mut rng = seeded(derive_seed(77, &[0]));
        let (n_q, n_p) = slot_counts(10, 0.5);
        let q_idx = draw_excluding(&mut rng, q.nrows(), Some(0), n_q);
        let p_idx = draw_excluding(&mut rng, p.nrows(), None, n_p);
        assert!(!q_idx.contains(&0));
        let reference = stack(q.select(Axis(0), &q_idx).view(), p.select(Axis(0), &p_idx).view()).unwrap();
        let direct =
            crate::flow::mixed_conditional_loglik(&m, q.slice(ndarray::s![0..1, ..]), reference.view(), 0).unwrap();
        assert_eq!(s, direct);
    }

    #[test]
    fn batch_norm_free_model_is_ratio_independent() {
        let m = no_bn_model(4);
        let (p, q) = pools();
        let cfg = StatisticConfig { b: 16, mc_reps: 3, ..Default::default() };
        let pools = MixPools { p_pool: p.view(), q_pool: q.view() };
        let eval = log_likelihood(&m, q.view(), EvalMode::Evaluation).unwrap();
        for i in 0..5 {
            let target = MixTarget { x: q.row(i), q_index: Some(i), p_index: None };
            for r in [0.1, 0.5, 0.9] {
                let s = stat_s(&m, &target, &pools, r, &cfg, i as u64).unwrap();
                assert!((s - eval[i]).abs() < 1e-10);
            }
            assert!(stat_delta(&m, &target, &pools, &cfg, i as u64).unwrap() < 1e-10);
        }
    }

    #[test]
    fn equal_ratios_give_zero_delta() {
        let m = bn_model(5);
        let (p, q) = pools();
        let cfg = StatisticConfig { b: 16, r1: 0.4, r2: 0.4, mc_reps: 4, ..Default::default() };
        let pools = MixPools { p_pool: p.view(), q_pool: q.view() };
        let target = MixTarget { x: q.row(3), q_index: Some(3), p_index: None };
        assert_eq!(stat_delta(&m, &target, &pools, &cfg, 9).unwrap(), 0.0);
    }

    #[test]
    fn full_ratio_on_whole_test_batch_is_training_mode() {
        let m = bn_model(6);
        let (p, q) = pools();
        let test = q.slice(ndarray::s![..12, ..]);
        let cfg = StatisticConfig { b: 12, mc_reps: 2, ..Default::default() };
        let pools = MixPools { p_pool: p.view(), q_pool: test };
        let train_mode = log_likelihood(&m, test, EvalMode::Training).unwrap();
        let s: Vec<f64> = (0..12)
            .map(|i| {
                stat_s(&m, &MixTarget { x: test.row(i), q_index: Some(i), p_index: None }, &pools, 1.0, &cfg, i as u64)
                    .unwrap()
            })
            .collect();
        for i in 0..12 {
            assert!((s[i] - train_mode[i]).abs() < 1e-10);
        }
        assert!((Array1::from(s).mean().unwrap() - train_mode.mean().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn insufficient_pools_are_reported() {
        let m = bn_model(7);
        let (p, q) = pools();
        let cfg = StatisticConfig::default();
        let small = q.slice(ndarray::s![..10, ..]);
        let pools = MixPools { p_pool: p.view(), q_pool: small };
        let target = MixTarget { x: small.row(0), q_index: Some(0), p_index: None };
        assert!(matches!(stat_delta(&m, &target, &pools, &cfg, 0), Err(Error::InsufficientPool(_))));
    }

    #[test]
    fn sweep_is_flat_without_batch_norm() {
        let m = no_bn_model(8);
        let (p, q) = pools();
        let cfg = StatisticConfig { b: 16, mc_reps: 2, ..Default::default() };
        let rows = sweep_ratio(&m, q.view(), p.view(), &[0.1, 0.5, 0.9], &cfg).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows[1..] {
            assert!((r.mean_bpd - rows[0].mean_bpd).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(StatisticConfig::default().validate().is_ok());
        assert!(StatisticConfig { r1: 0.9, r2: 0.1, ..Default::default() }.validate().is_err());
        assert!(StatisticConfig { r1: 0.01, ..Default::default() }.validate().is_err());
        assert!(StatisticConfig { mc_reps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn attack_rejects_bad_bracket() {
        let m = FlowModel::identity(2);
        let x = standard_normal_latents(50, 2, 1);
        let cfg = AttackConfig { t_lo: 2.0, t_hi: 1.0, ..Default::default() };
        assert!(matches!(attack_tune_temperature(&m, &m, x.view(), x.view(), &cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn self_attack_finds_unit_temperature() {
        let m = FlowModel::identity(2);
        let target = standard_normal_latents(2000, 2, 11);
        let reference = standard_normal_latents(2000, 2, 12);
        let cfg = AttackConfig { n_samples: 2000, seed: 13, ..Default::default() };
        let res = attack_tune_temperature(&m, &m, target.view(), reference.view(), &cfg).unwrap();
        assert!((res.tuned_t - 1.0).abs() < 0.05, "{}", res.tuned_t);
        assert!(res.median_gap_bpd.abs() <= 0.05);
    }

    #[test]
    fn attack_cancels_latent_scale() {
        // q maps latents to twice their size: constant log-scale -ln 2 in both layers
        let mut q = FlowModel::identity(2);
        let raw = (-(2.0f64.ln()) / 3.0).atanh();
        for layer in &mut q.layers {
            layer.s_net.layers[0].bias[0] = raw;
        }
        let z = standard_normal_latents(10, 2, 3);
        let x = crate::flow::flow_inverse(&q, z.view()).unwrap();
        assert!((&x - &(&z * 2.0)).iter().all(|d| d.abs() < 1e-12));
        let p = FlowModel::identity(2);
        let target = standard_normal_latents(2000, 2, 14);
        let reference = standard_normal_latents(2000, 2, 15);
        let cfg = AttackConfig { n_samples: 2000, seed: 16, ..Default::default() };
        let res = attack_tune_temperature(&p, &q, target.view(), reference.view(), &cfg).unwrap();
        assert!((res.tuned_t - 0.5).abs() < 0.05, "{}", res.tuned_t);
    }
}
