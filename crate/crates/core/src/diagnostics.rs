//! Generalization diagnostics: loss interpolation between two solutions,
//! multi-pool trajectories, the train/test gap, the `tr(C)/tr(F)` ratio and
//! an empirical stability estimate.

use rand::Rng as _;

use crate::exec;
use crate::objectives::{self, LossEstimate};
use crate::report::{LinePlot, Series, Table};
use crate::seeds::{self, stream};
use crate::solvers::{self, AlgorithmParams, EmbeddingSpec, HeadKind};
use crate::taskspace::{self, Dataset, Episode, SupportPool, TaskConfig};
use crate::trainer;
use crate::{Error, Result};

pub const DEFAULT_INTERPOLATION_POINTS: usize = 25;
pub const DEFAULT_EXTRA_POOLS: usize = 10;
pub const MIN_TIC_EPISODES: usize = 100;
const TR_F_FLOOR: f64 = 1e-12;
const POOL_ATTEMPTS: u64 = 64;

/// Episodic estimator settings: classes, task shape, head, episode count and
/// seed.
#[derive(Debug, Clone, Copy)]
pub struct EvalSetup<'a> {
    pub dataset: &'a Dataset,
    pub cfg: TaskConfig,
    pub head: HeadKind,
    pub n_episodes: usize,
    pub seed: u64,
}

impl EvalSetup<'_> {
    pub fn ml(&self, w: &AlgorithmParams) -> Result<LossEstimate> {
        objectives::ml_loss_estimate(w, self.dataset, &self.cfg, self.head, self.n_episodes, self.seed)
    }
}

/// `n` evenly spaced points on `[lo, hi]` (endpoints exact).
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect(),
    }
}

/// `n` points on `[-0.2, 1.2]` with `0` and `1` added, so both solutions
/// appear on the curve.
pub fn interpolation_alphas(n: usize) -> Vec<f64> {
    let mut a = linspace(-0.2, 1.2, n);
    a.extend([0.0, 1.0]);
    a.sort_by(f64::total_cmp);
    a.dedup();
    a
}

/// [`interpolation_alphas`] at the default point count.
pub fn default_alphas() -> Vec<f64> {
    interpolation_alphas(DEFAULT_INTERPOLATION_POINTS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationCurve {
    pub alphas: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub test_losses: Vec<f64>,
    pub train_accuracies: Vec<f64>,
    pub test_accuracies: Vec<f64>,
}

impl InterpolationCurve {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["alpha", "train_loss", "test_loss", "train_acc", "test_acc"]);
        for i in 0..self.alphas.len() {
            t.push(vec![self.alphas[i], self.train_losses[i], self.test_losses[i], self.train_accuracies[i], self.test_accuracies[i]]);
        }
        t
    }

    pub fn to_plot(&self) -> LinePlot {
        LinePlot::new("loss along (1 - alpha) w_fixml + alpha w_ml", "alpha", "episodic loss")
            .with(Series::new("train", "blue", self.alphas.clone(), self.train_losses.clone()))
            .with(Series::new("test", "red", self.alphas.clone(), self.test_losses.clone()))
    }
}

fn interpolate(w0: &AlgorithmParams, w1: &AlgorithmParams, a: f64) -> Result<AlgorithmParams> {
    if a == 0.0 {
        Ok(w0.clone())
    } else if a == 1.0 {
        Ok(w1.clone())
    } else {
        w0.lerp(w1, a)
    }
}

/// Episodic loss at `(1 - a) w_fml + a w_ml` for each `a`, on both class
/// sets, with the same episode seeds at every point.
pub fn interpolate_losses(
    w_fml: &AlgorithmParams,
    w_ml: &AlgorithmParams,
    alphas: &[f64],
    train_eval: &EvalSetup<'_>,
    test_eval: &EvalSetup<'_>,
) -> Result<InterpolationCurve> {
    if w_fml.spec() != w_ml.spec() {
        return Err(Error::Dimension { what: "interpolation endpoints", expected: w_fml.len(), got: w_ml.len() });
    }
    if alphas.is_empty() || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("alphas must be non-empty and strictly increasing"));
    }
    let mut c = InterpolationCurve {
        alphas: alphas.to_vec(),
        train_losses: Vec::new(),
        test_losses: Vec::new(),
        train_accuracies: Vec::new(),
        test_accuracies: Vec::new(),
    };
    for &a in alphas {
        let w = interpolate(w_fml, w_ml, a)?;
        let tr = train_eval.ml(&w)?;
        let te = test_eval.ml(&w)?;
        c.train_losses.push(tr.mean);
        c.test_losses.push(te.mean);
        c.train_accuracies.push(tr.accuracy_mean);
        c.test_accuracies.push(te.accuracy_mean);
    }
    Ok(c)
}

/// Per-checkpoint losses: the base pool (blue), the episodic objective (red)
/// and each extra pool (green).
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTrajectory {
    pub blue: Vec<f64>,
    pub red: Vec<f64>,
    pub green: Vec<Vec<f64>>,
    pub extra_pools: Vec<SupportPool>,
}

impl PoolTrajectory {
    /// Columns `checkpoint,blue,red,green_0,...`.
    pub fn to_table(&self) -> Table {
        let mut headers = vec!["checkpoint".to_string(), "blue".into(), "red".into()];
        headers.extend((0..self.green.len()).map(|j| format!("green_{j}")));
        let mut t = Table { headers, rows: Vec::new() };
        for i in 0..self.blue.len() {
            let mut row = vec![i as f64, self.blue[i], self.red[i]];
            row.extend(self.green.iter().map(|g| g[i]));
            t.push(row);
        }
        t
    }

    pub fn to_plot(&self, xs: &[f64]) -> LinePlot {
        let mut p = LinePlot::new("fixed-pool and episodic losses", "epoch", "loss")
            .with(Series::new("blue: base pool", "blue", xs.to_vec(), self.blue.clone()))
            .with(Series::new("red: episodic", "red", xs.to_vec(), self.red.clone()));
        for (j, g) in self.green.iter().enumerate() {
            p = p.with(Series::new(&format!("green: pool {j}"), "green", xs.to_vec(), g.clone()));
        }
        p
    }
}

/// Seed of the `j`-th extra pool on its `attempt`-th draw.
pub fn extra_pool_seed(seed: u64, j: usize, attempt: u64) -> u64 {
    seeds::derive(seed, &[stream::POOL, j as u64, attempt])
}

/// Samples `n` pools distinct from `base` and from each other, redrawing on
/// collision.
pub fn sample_extra_pools(dataset: &Dataset, base: &SupportPool, n: usize, seed: u64) -> Result<Vec<SupportPool>> {
    let mut pools: Vec<SupportPool> = Vec::with_capacity(n);
    for j in 0..n {
        let mut found = None;
        for attempt in 0..POOL_ATTEMPTS {
            let p = taskspace::sample_support_pool(dataset, base.shots(), extra_pool_seed(seed, j, attempt))?;
            if &p != base && !pools.contains(&p) {
                found = Some(p);
                break;
            }
        }
        pools.push(found.ok_or_else(|| Error::invalid(format!("could not draw a distinct support pool {j}")))?);
    }
    Ok(pools)
}

/// Evaluates `checkpoints` on `n_extra_pools` freshly drawn pools besides the
/// base pool and the episodic objective, all with evaluation seed `seed`.
#[allow(clippy::too_many_arguments)]
pub fn multi_pool_trajectory(
    checkpoints: &[AlgorithmParams],
    dataset: &Dataset,
    base_pool: &SupportPool,
    n_extra_pools: usize,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<PoolTrajectory> {
    if n_extra_pools == 0 {
        return Err(Error::invalid("n_extra_pools must be >= 1"));
    }
    let extras = sample_extra_pools(dataset, base_pool, n_extra_pools, seed)?;
    multi_pool_trajectory_with_pools(checkpoints, dataset, base_pool, extras, cfg, head, n_episodes, seed)
}

/// [`multi_pool_trajectory`] with caller-supplied extra pools (no collision
/// check).
#[allow(clippy::too_many_arguments)]
pub fn multi_pool_trajectory_with_pools(
    checkpoints: &[AlgorithmParams],
    dataset: &Dataset,
    base_pool: &SupportPool,
    extra_pools: Vec<SupportPool>,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<PoolTrajectory> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to evaluate"));
    }
    let mut out = PoolTrajectory { blue: Vec::new(), red: Vec::new(), green: vec![Vec::new(); extra_pools.len()], extra_pools };
    for w in checkpoints {
        out.blue.push(objectives::fixml_loss_estimate(w, dataset, base_pool, cfg, head, n_episodes, seed)?.mean);
        out.red.push(objectives::ml_loss_estimate(w, dataset, cfg, head, n_episodes, seed)?.mean);
        for (j, p) in out.extra_pools.iter().enumerate() {
            out.green[j].push(objectives::fixml_loss_estimate(w, dataset, p, cfg, head, n_episodes, seed)?.mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// Test loss minus train loss.
    pub gap: f64,
    pub train: LossEstimate,
    pub test: LossEstimate,
}

fn class_content(d: &Dataset, c: usize) -> Vec<u64> {
    (0..d.per_class()).flat_map(|i| d.example(c, i).iter().map(|v| v.to_bits())).collect()
}

fn same_content(a: &Dataset, b: &Dataset) -> bool {
    a.n_classes() == b.n_classes()
        && a.per_class() == b.per_class()
        && a.dim() == b.dim()
        && (0..a.n_classes()).all(|c| class_content(a, c) == class_content(b, c))
}

/// Episodic loss on the test classes minus that on the train classes.
///
/// Passing the same dataset twice is allowed (gap 0 under equal seeds);
/// otherwise a class present in both is an error.
pub fn generalization_gap(
    w: &AlgorithmParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<GapReport> {
    if !same_content(train, test) {
        let train_classes: std::collections::BTreeSet<Vec<u64>> = (0..train.n_classes()).map(|c| class_content(train, c)).collect();
        if let Some(c) = (0..test.n_classes()).find(|&c| train_classes.contains(&class_content(test, c))) {
            return Err(Error::invalid(format!("test class {c} also appears in the train classes")));
        }
    }
    let tr = objectives::ml_loss_estimate(w, train, cfg, head, n_episodes, seed)?;
    let te = objectives::ml_loss_estimate(w, test, cfg, head, n_episodes, seed)?;
    Ok(GapReport { gap: te.mean - tr.mean, train: tr, test: te })
}

/// Where the query labels of the `tr(F)` gradients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// Drawn from the model's own predictive softmax.
    ModelSample,
    /// The true labels (makes `F` coincide with `C`).
    TrueLabels,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TicReport {
    pub tr_c: f64,
    pub tr_f: f64,
    pub ratio: f64,
    pub n_samples: usize,
    /// Mean true-label episode loss, for judging how far from zero loss the
    /// model sits.
    pub train_loss: f64,
    pub gen_gap: Option<f64>,
}

impl TicReport {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["tr_c", "tr_f", "ratio", "n_samples", "train_loss", "gen_gap"]);
        t.push(vec![self.tr_c, self.tr_f, self.ratio, self.n_samples as f64, self.train_loss, self.gen_gap.unwrap_or(f64::NAN)]);
        t
    }
}

fn sample_categorical(p: &[f64], rng: &mut seeds::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// `tr(C) / tr(F)` with model-sampled labels for `F`.
pub fn tic_ratio(
    w: &AlgorithmParams,
    dataset: &Dataset,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<TicReport> {
    tic_ratio_with(w, dataset, cfg, head, n_episodes, seed, LabelSource::ModelSample)
}

/// `tr(C) = mean ||g_true||^2`, `tr(F) = mean ||g_resampled||^2` over
/// `n_episodes` episodes, using per-episode gradients.
pub fn tic_ratio_with(
    w: &AlgorithmParams,
    dataset: &Dataset,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
    labels: LabelSource,
) -> Result<TicReport> {
    if n_episodes < MIN_TIC_EPISODES {
        return Err(Error::invalid(format!("tic_ratio needs at least {MIN_TIC_EPISODES} episodes")));
    }
    cfg.validate(dataset)?;
    let parts = exec::map_indexed(n_episodes, |i| -> Result<(f64, f64, f64)> {
        let ep = taskspace::sample_episode_ml(dataset, cfg, objectives::eval_episode_seed(seed, i))?;
        let truth = ep.query_labels();
        let c = objectives::episode_outcome_with_labels(w, &ep, head, &truth, true)?;
        let f_labels = match labels {
            LabelSource::TrueLabels => truth,
            LabelSource::ModelSample => {
                let probs = solvers::softmax_rows(&objectives::episode_logits(w, &ep, head)?);
                let mut rng = seeds::rng_for(seed, &[stream::LABELS, i as u64]);
                (0..probs.nrows())
                    .map(|r| {
                        let row: Vec<f64> = probs.row(r).iter().copied().collect();
                        sample_categorical(&row, &mut rng)
                    })
                    .collect()
            }
        };
        let f = objectives::episode_outcome_with_labels(w, &ep, head, &f_labels, true)?;
        let sq = |g: &Option<Vec<f64>>| g.as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>());
        Ok((sq(&c.grad), sq(&f.grad), c.loss))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| -> Vec<f64> { parts.iter().map(|p| [p.0, p.1, p.2][k]).collect() };
    let tr_c = exec::mean(&col(0));
    let tr_f = exec::mean(&col(1));
    if tr_f < TR_F_FLOOR {
        return Err(Error::Degenerate { what: "Fisher trace estimate".into(), lambda_min: tr_f });
    }
    Ok(TicReport { tr_c, tr_f, ratio: tr_c / tr_f, n_samples: n_episodes, train_loss: exec::mean(&col(2)), gen_gap: None })
}

/// Settings of the leave-one-task-out retrainings.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityConfig {
    pub cfg: TaskConfig,
    pub head: HeadKind,
    pub embedding: EmbeddingSpec,
    /// Size of the fixed training task list.
    pub n_tasks: usize,
    pub n_probe: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Empirical max over perturbations and probes; a lower estimate of the
    /// uniform stability constant.
    pub beta_hat: f64,
    pub per_perturbation: Vec<f64>,
}

impl StabilityReport {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["removed_task", "max_probe_diff"]);
        for (i, v) in self.per_perturbation.iter().enumerate() {
            t.push(vec![i as f64, *v]);
        }
        t
    }
}

/// Trains on a seeded task list and on the list with each of the first
/// `n_perturbations` tasks removed; reports the largest probe-loss change.
pub fn stability_estimate(dataset: &Dataset, config: &StabilityConfig, n_perturbations: usize, seed: u64) -> Result<StabilityReport> {
    config.cfg.validate(dataset)?;
    if config.n_tasks < n_perturbations || config.n_probe == 0 {
        return Err(Error::invalid("stability needs n_tasks >= n_perturbations and n_probe >= 1"));
    }
    let draw = |tag: u64, n: usize| -> Result<Vec<Episode>> {
        (0..n).map(|i| taskspace::sample_episode_ml(dataset, &config.cfg, seeds::derive(seed, &[tag, i as u64]))).collect()
    };
    let tasks = draw(stream::TASK, config.n_tasks)?;
    let probes = draw(stream::PROBE, config.n_probe)?;
    let init = trainer::init_params(&config.embedding, seed)?;
    stability_on_tasks(&tasks, &probes, config, init, n_perturbations)
}

/// [`stability_estimate`] on explicit task and probe lists.
pub fn stability_on_tasks(
    tasks: &[Episode],
    probes: &[Episode],
    config: &StabilityConfig,
    init: AlgorithmParams,
    n_perturbations: usize,
) -> Result<StabilityReport> {
    if n_perturbations < 2 || n_perturbations > tasks.len() {
        return Err(Error::invalid("n_perturbations must lie in [2, number of tasks]"));
    }
    let fit = |list: &[Episode]| trainer::train_on_tasks(list, config.head, init.clone(), config.steps, config.lr, config.momentum);
    let probe_losses = |w: &AlgorithmParams| -> Result<Vec<f64>> {
        probes.iter().map(|p| objectives::episode_loss(w, p, config.head).map(|l| l.0)).collect()
    };
    let base = probe_losses(&fit(tasks)?)?;
    let per_perturbation = exec::map_indexed(n_perturbations, |i| -> Result<f64> {
        let mut reduced = tasks.to_vec();
        reduced.remove(i);
        let l = probe_losses(&fit(&reduced)?)?;
        Ok(base.iter().zip(&l).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(StabilityReport { beta_hat: per_perturbation.iter().copied().fold(0.0, f64::max), per_perturbation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_contains_endpoints() {
        let a = default_alphas();
        assert_eq!(a.len(), DEFAULT_INTERPOLATION_POINTS + 2);
        assert_eq!(a[0], -0.2);
        assert_eq!(*a.last().unwrap(), 1.2);
        assert!(a.contains(&0.0) && a.contains(&1.0));
        assert!(a.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn categorical_sampler_respects_point_mass() {
        let mut rng = seeds::rng(3);
        for _ in 0..20 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }
}
