//! Closed-form machinery for meta-linear regression with one-step gradient
//! adaptation.
//!
//! Tasks draw `x ~ N(0, Sigma_tau)` and `y = x^T theta_tau + eps`. An
//! initialization `theta` is adapted by one gradient step on a support set and
//! judged by the true risk of the adapted parameter. Fixing the support matrix
//! `X_F` turns the objective into a quadratic with Hessian `A E[Sigma] A`, where
//! `A = I - c X_F^T X_F`; drawing the support afresh per task gives the
//! episodic Hessian `E[(I - c S) Sigma (I - c S)]`.
//!
//! Two step-size conventions coexist, selected by [`StepScale`]: the bare step
//! `theta - alpha X^T (X theta - y)` and the per-sample step that divides the
//! gradient by the number of support rows.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::exec;
use crate::linalg;
use crate::seeds::{self, Rng};
use crate::taskspace::{self, RegressionMetaDistribution, RegressionTask};
use crate::{Error, Result};

/// Inner-step gradient normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepScale {
    /// `theta - alpha * X^T (X theta - y)`.
    Bare,
    /// `theta - (alpha / n) * X^T (X theta - y)`.
    PerSample,
}

impl StepScale {
    /// Effective multiplier on `X^T X` for an `n`-row support.
    pub fn coefficient(self, alpha: f64, n: usize) -> f64 {
        match self {
            StepScale::Bare => alpha,
            StepScale::PerSample => alpha / n as f64,
        }
    }
}

/// Noise-term convention of the fixed-support risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskScale {
    /// `1/2 ||X_F eta - y||^2` in expectation (noise term `n sigma^2 / 2`).
    Total,
    /// The total risk divided by the number of support rows.
    #[default]
    PerSample,
}

/// A finite task distribution: tasks with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPopulation {
    tasks: Vec<RegressionTask>,
    weights: Vec<f64>,
}

impl TaskPopulation {
    pub fn new(tasks: Vec<RegressionTask>, weights: Vec<f64>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("task population is empty"));
        }
        if tasks.len() != weights.len() {
            return Err(Error::Dimension { what: "population weights", expected: tasks.len(), got: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("population weights must be >= 0"));
        }
        let total = exec::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("population weights sum to {total}, not 1")));
        }
        let p = tasks[0].dim();
        if let Some(t) = tasks.iter().find(|t| t.dim() != p || t.spectrum.len() != p) {
            return Err(Error::Dimension { what: "population task dim", expected: p, got: t.dim() });
        }
        if tasks.iter().any(|t| t.spectrum.iter().any(|s| !(*s > 0.0)) || !(t.sigma >= 0.0)) {
            return Err(Error::invalid("population tasks need positive spectra and sigma >= 0"));
        }
        Ok(TaskPopulation { tasks, weights })
    }

    pub fn uniform(tasks: Vec<RegressionTask>) -> Result<Self> {
        let n = tasks.len().max(1);
        TaskPopulation::new(tasks, vec![1.0 / n as f64; n])
    }

    /// Empirical population of `m` i.i.d. draws from a meta-distribution.
    pub fn from_meta(meta: &RegressionMetaDistribution, m: usize, seed: u64) -> Result<Self> {
        let tasks =
            (0..m).map(|i| taskspace::sample_regression_task(meta, seeds::derive(seed, &[i as u64]))).collect::<Result<Vec<_>>>()?;
        TaskPopulation::uniform(tasks)
    }

    pub fn tasks(&self) -> &[RegressionTask] {
        &self.tasks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].dim()
    }

    /// `E_tau[f(tau)]` for matrix-valued `f`.
    pub fn expect_mat(&self, f: impl Fn(&RegressionTask) -> DMatrix<f64>) -> DMatrix<f64> {
        let p = self.dim();
        self.tasks.iter().zip(&self.weights).fold(DMatrix::zeros(p, p), |acc, (t, w)| acc + f(t) * *w)
    }

    pub fn expect_vec(&self, f: impl Fn(&RegressionTask) -> DVector<f64>) -> DVector<f64> {
        let p = self.dim();
        self.tasks.iter().zip(&self.weights).fold(DVector::zeros(p), |acc, (t, w)| acc + f(t) * *w)
    }

    pub fn mean_covariance(&self) -> DMatrix<f64> {
        self.expect_mat(RegressionTask::covariance)
    }

    pub fn mean_theta(&self) -> DVector<f64> {
        self.expect_vec(|t| t.theta.clone())
    }

    /// Per-coordinate moments of the covariance diagonal.
    pub fn diag_moments(&self) -> DiagMoments {
        let diag = |t: &RegressionTask| t.covariance().diagonal();
        let mean_spectrum = self.expect_vec(diag);
        let mean_spectrum_theta = self.expect_vec(|t| diag(t).component_mul(&t.theta));
        let second = self.expect_vec(|t| diag(t).map(|v| v * v));
        let var_spectrum = (second - mean_spectrum.map(|v| v * v)).map(|v| v.max(0.0));
        DiagMoments { mean_spectrum, mean_spectrum_theta, var_spectrum }
    }

    fn draw_index(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }
}

/// `E[Sigma^j]`, `E[Sigma^j theta^j]` and `Var[Sigma^j]` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagMoments {
    pub mean_spectrum: DVector<f64>,
    pub mean_spectrum_theta: DVector<f64>,
    pub var_spectrum: DVector<f64>,
}

/// A fixed support matrix `X_F` (n x p) with its Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedSupport {
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
}

impl FixedSupport {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("fixed support must be non-empty"));
        }
        let gram = x.transpose() * &x;
        Ok(FixedSupport { x, gram })
    }

    /// Support whose Gram matrix is `diag(g)` (square, `sqrt(g)` on the
    /// diagonal).
    pub fn from_diag_gram(g: &[f64]) -> Result<Self> {
        if g.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("diagonal gram entries must be >= 0"));
        }
        FixedSupport::new(DMatrix::from_diagonal(&DVector::from_iterator(g.len(), g.iter().map(|v| v.sqrt()))))
    }

    /// Random Gaussian support with `rows` i.i.d. `N(0, Sigma)` rows from `task`.
    pub fn sample(task: &RegressionTask, rows: usize, seed: u64) -> Result<Self> {
        let (x, _) = taskspace::sample_regression_data(task, rows, seed)?;
        FixedSupport::new(x)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// `I - c X_F^T X_F` with `c` from the step convention.
    pub fn step_matrix(&self, alpha: f64, scale: StepScale) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::identity(p, p) - &self.gram * scale.coefficient(alpha, self.rows())
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// `R(eta; tau) = 1/2 (eta - theta)^T Sigma (eta - theta) + 1/2 sigma^2`.
pub fn true_risk(eta: &DVector<f64>, task: &RegressionTask) -> Result<f64> {
    check_dim("eta", task.dim(), eta.len())?;
    let d = eta - &task.theta;
    Ok(0.5 * d.dot(&(task.covariance() * &d)) + 0.5 * task.sigma * task.sigma)
}

/// Expected squared loss of `eta` on the fixed design `X_F` with fresh noise.
pub fn fixed_support_risk(eta: &DVector<f64>, support: &FixedSupport, task: &RegressionTask, scale: RiskScale) -> Result<f64> {
    check_dim("eta", task.dim(), eta.len())?;
    check_dim("fixed support cols", task.dim(), support.dim())?;
    let d = eta - &task.theta;
    let n = support.rows() as f64;
    let total = 0.5 * d.dot(&(support.gram() * &d)) + 0.5 * n * task.sigma * task.sigma;
    Ok(match scale {
        RiskScale::Total => total,
        RiskScale::PerSample => total / n,
    })
}

/// One gradient step on `1/2 ||X_s theta - y_s||^2`.
pub fn onestep_adapt(theta: &DVector<f64>, xs: &DMatrix<f64>, ys: &DVector<f64>, alpha: f64, scale: StepScale) -> Result<DVector<f64>> {
    check_dim("support cols", theta.len(), xs.ncols())?;
    check_dim("support responses", xs.nrows(), ys.len())?;
    let grad = xs.transpose() * (xs * theta - ys);
    Ok(theta - grad * scale.coefficient(alpha, xs.nrows()))
}

/// `A_F(alpha) = I - (alpha / n) X_F^T X_F`.
pub fn af_matrix(support: &FixedSupport, alpha: f64, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("af_matrix needs n >= 1"));
    }
    let p = support.dim();
    Ok(DMatrix::identity(p, p) - support.gram() * (alpha / n as f64))
}

/// Fixed-support objective `E_tau E_eps R(theta_hat; tau)` in closed form,
/// where `theta_hat` is one step on `(X_F, X_F theta_tau + eps)`.
pub fn fml_population_objective(
    theta: &DVector<f64>,
    alpha: f64,
    support: &FixedSupport,
    pop: &TaskPopulation,
    scale: StepScale,
) -> Result<f64> {
    check_dim("theta", pop.dim(), theta.len())?;
    let a = support.step_matrix(alpha, scale);
    let c = scale.coefficient(alpha, support.rows());
    let mut total = 0.0;
    for (t, w) in pop.tasks.iter().zip(&pop.weights) {
        let sigma = t.covariance();
        let d = &a * (theta - &t.theta);
        // E_eps of the cross term vanishes; c^2 sigma^2 tr(X Sigma X^T) remains
        let noise = c * c * t.sigma * t.sigma * (support.x() * &sigma * support.x().transpose()).trace();
        total += w * (0.5 * d.dot(&(&sigma * &d)) + 0.5 * noise + 0.5 * t.sigma * t.sigma);
    }
    Ok(total)
}

/// `H_FML = A E[Sigma] A`.
pub fn hessian_fml(alpha: f64, support: &FixedSupport, pop: &TaskPopulation, scale: StepScale) -> Result<DMatrix<f64>> {
    check_dim("fixed support cols", pop.dim(), support.dim())?;
    let a = support.step_matrix(alpha, scale);
    Ok(&a * pop.mean_covariance() * &a)
}

/// Minimiser of [`fml_population_objective`]:
/// `(A E[Sigma] A)^{-1} E[A Sigma A theta]`.
pub fn theta_star_fml(alpha: f64, support: &FixedSupport, pop: &TaskPopulation, scale: StepScale) -> Result<DVector<f64>> {
    let h = hessian_fml(alpha, support, pop, scale)?;
    let a = support.step_matrix(alpha, scale);
    let rhs = pop.expect_vec(|t| &a * t.covariance() * &a * &t.theta);
    linalg::spd_solve(&h, &rhs, "A E[Sigma] A")
}

/// Exact per-task episodic curvature `E_S[(I - cS) Sigma (I - cS)]` for an
/// `n`-row Gaussian support, using the Wishart moments
/// `E[S] = n Sigma` and `E[S Sigma S] = n(n+1) Sigma^3 + n tr(Sigma^2) Sigma`.
pub fn ml_task_curvature_exact(task: &RegressionTask, alpha: f64, n_support: usize, scale: StepScale) -> DMatrix<f64> {
    let c = scale.coefficient(alpha, n_support);
    let n = n_support as f64;
    let s = task.covariance();
    let s2 = &s * &s;
    let s3 = &s2 * &s;
    &s - &s2 * (2.0 * c * n) + (s3 * (n * (n + 1.0)) + &s * (n * s2.trace())) * (c * c)
}

/// Episodic optimum with its Monte Carlo uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct MlSolution {
    pub theta: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// 95% half-width per coordinate from batch means (zero for exact routes).
    pub half_width_95: DVector<f64>,
}

const MC_BATCHES: usize = 10;

/// Episodic optimum `(E[(I-cS) Sigma (I-cS)])^{-1} E[(I-cS) Sigma (I-cS) theta]`
/// with the inner expectation over supports estimated by `mc_budget` draws of
/// `n_support` rows per task.
pub fn theta_star_ml(
    alpha: f64,
    pop: &TaskPopulation,
    n_support: usize,
    mc_budget: usize,
    seed: u64,
    scale: StepScale,
) -> Result<MlSolution> {
    if n_support == 0 || mc_budget < MC_BATCHES {
        return Err(Error::invalid(format!("need n_support >= 1 and mc_budget >= {MC_BATCHES}")));
    }
    let c = scale.coefficient(alpha, n_support);
    let p = pop.dim();
    let per_batch = mc_budget / MC_BATCHES;
    // batch-level (H, rhs) sums, fanned out over (task, batch)
    let n_tasks = pop.tasks.len();
    let parts = exec::map_indexed(n_tasks * MC_BATCHES, |job| {
        let (ti, b) = (job / MC_BATCHES, job % MC_BATCHES);
        let task = &pop.tasks[ti];
        let sigma = task.covariance();
        let mut rng = seeds::rng_for(seed, &[ti as u64, b as u64]);
        let mut h = DMatrix::zeros(p, p);
        for _ in 0..per_batch {
            let (x, _) = taskspace::sample_regression_data_with(task, n_support, &mut rng);
            let a = DMatrix::identity(p, p) - x.transpose() * &x * c;
            h += &a * &sigma * &a;
        }
        h / per_batch as f64
    });
    let mut batch_thetas = Vec::with_capacity(MC_BATCHES);
    let mut h_total = DMatrix::zeros(p, p);
    let mut rhs_total = DVector::zeros(p);
    for b in 0..MC_BATCHES {
        let mut h = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for (ti, w) in pop.weights.iter().enumerate() {
            let hb = &parts[ti * MC_BATCHES + b];
            rhs += hb * &pop.tasks[ti].theta * *w;
            h += hb * *w;
        }
        batch_thetas.push(linalg::spd_solve(&h, &rhs, "episodic Hessian (batch)")?);
        h_total += h;
        rhs_total += rhs;
    }
    h_total /= MC_BATCHES as f64;
    rhs_total /= MC_BATCHES as f64;
    let theta = linalg::spd_solve(&h_total, &rhs_total, "episodic Hessian")?;
    let half_width_95 = DVector::from_fn(p, |j, _| {
        let xs: Vec<f64> = batch_thetas.iter().map(|t| t[j]).collect();
        1.96 * exec::sample_std(&xs) / (MC_BATCHES as f64).sqrt()
    });
    Ok(MlSolution { theta, hessian: h_total, half_width_95 })
}

/// Same optimum with the support expectation taken in closed form.
pub fn theta_star_ml_exact(alpha: f64, pop: &TaskPopulation, n_support: usize, scale: StepScale) -> Result<MlSolution> {
    if n_support == 0 {
        return Err(Error::invalid("n_support must be >= 1"));
    }
    let h = pop.expect_mat(|t| ml_task_curvature_exact(t, alpha, n_support, scale));
    let rhs = pop.expect_vec(|t| ml_task_curvature_exact(t, alpha, n_support, scale) * &t.theta);
    let theta = linalg::spd_solve(&h, &rhs, "episodic Hessian")?;
    let p = theta.len();
    Ok(MlSolution { theta, hessian: h, half_width_95: DVector::zeros(p) })
}

/// `(H_FML, H_ML)`; the episodic one by Monte Carlo.
pub fn hessians(
    alpha: f64,
    support: &FixedSupport,
    pop: &TaskPopulation,
    n_support: usize,
    mc_budget: usize,
    seed: u64,
    scale: StepScale,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h_fml = hessian_fml(alpha, support, pop, scale)?;
    let h_ml = theta_star_ml(alpha, pop, n_support, mc_budget, seed, scale)?.hessian;
    Ok((h_fml, h_ml))
}

/// Observed support/query data for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub xs: DMatrix<f64>,
    pub ys: DVector<f64>,
    pub xq: DMatrix<f64>,
    pub yq: DVector<f64>,
}

impl TaskBatch {
    pub fn sample(task: &RegressionTask, n_support: usize, n_query: usize, seed: u64) -> Result<Self> {
        let (xs, ys) = taskspace::sample_regression_data(task, n_support, seeds::derive(seed, &[0]))?;
        let (xq, yq) = taskspace::sample_regression_data(task, n_query, seeds::derive(seed, &[1]))?;
        Ok(TaskBatch { xs, ys, xq, yq })
    }

    fn query_weight(&self, normalize_query: bool) -> f64 {
        if normalize_query {
            1.0 / self.xq.nrows() as f64
        } else {
            1.0
        }
    }
}

/// Empirical episodic loss `sum_i 1/2 ||X_q,i theta_hat_i(theta) - y_q,i||^2`
/// (each task divided by its query count when `normalize_query`).
pub fn empirical_ml_objective(
    theta: &DVector<f64>,
    batches: &[TaskBatch],
    alpha: f64,
    scale: StepScale,
    normalize_query: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let adapted = onestep_adapt(theta, &b.xs, &b.ys, alpha, scale)?;
        total += 0.5 * b.query_weight(normalize_query) * (&b.xq * adapted - &b.yq).norm_squared();
    }
    Ok(total)
}

/// Analytic gradient of [`empirical_ml_objective`].
pub fn empirical_ml_gradient(
    theta: &DVector<f64>,
    batches: &[TaskBatch],
    alpha: f64,
    scale: StepScale,
    normalize_query: bool,
) -> Result<DVector<f64>> {
    let p = theta.len();
    let mut g = DVector::zeros(p);
    for b in batches {
        let c = scale.coefficient(alpha, b.xs.nrows());
        let a = DMatrix::identity(p, p) - b.xs.transpose() * &b.xs * c;
        let adapted = onestep_adapt(theta, &b.xs, &b.ys, alpha, scale)?;
        let r = &b.xq * adapted - &b.yq;
        g += a * (b.xq.transpose() * r) * b.query_weight(normalize_query);
    }
    Ok(g)
}

/// Minimiser of the empirical episodic loss: solves
/// `[sum A_i G_i A_i] theta = sum A_i X_q,i^T (y_q,i - c X_q,i X_s,i^T y_s,i)`
/// with `A_i = I - c X_s,i^T X_s,i` and `G_i = X_q,i^T X_q,i`.
pub fn theta_hat_ml_empirical(batches: &[TaskBatch], alpha: f64, scale: StepScale, normalize_query: bool) -> Result<DVector<f64>> {
    let first = batches.first().ok_or_else(|| Error::invalid("no task batches"))?;
    let p = first.xs.ncols();
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for b in batches {
        check_dim("support cols", p, b.xs.ncols())?;
        check_dim("query cols", p, b.xq.ncols())?;
        let c = scale.coefficient(alpha, b.xs.nrows());
        let a = DMatrix::identity(p, p) - b.xs.transpose() * &b.xs * c;
        let g = b.xq.transpose() * &b.xq;
        let wq = b.query_weight(normalize_query);
        lhs += &a * g * &a * wq;
        let target = &b.yq - &b.xq * (b.xs.transpose() * &b.ys) * c;
        rhs += &a * (b.xq.transpose() * target) * wq;
    }
    linalg::spd_solve(&lhs, &rhs, "empirical episodic normal matrix")
}

/// Coordinatewise optimum for diagonal `X_F^T X_F = diag(g)` and diagonal
/// covariances: `(A^j)^2 E[Sigma^j theta^j] / ((A^j)^2 E[Sigma^j])` with
/// `A^j = 1 - alpha g^j / n`.
pub fn theta_star_diag(alpha: f64, n: usize, diag_gram: &[f64], moments: &DiagMoments) -> Result<DVector<f64>> {
    let p = moments.mean_spectrum.len();
    check_dim("diag gram", p, diag_gram.len())?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    (0..p)
        .map(|j| {
            let a = 1.0 - alpha * diag_gram[j] / n as f64;
            let den = a * a * moments.mean_spectrum[j];
            if a == 0.0 || !(moments.mean_spectrum[j] > 0.0) {
                return Err(Error::Degenerate { what: format!("diagonal optimum, coordinate {j}"), lambda_min: den });
            }
            Ok(a * a * moments.mean_spectrum_theta[j] / den)
        })
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// `A^{i*} = sqrt(kappa2 / E[Sigma^i])`: the smallest diagonal step matrix
/// meeting `(A^i)^2 E[Sigma^i] >= kappa2`.
pub fn optimal_af(mean_spectrum: &[f64], kappa2: f64) -> Result<DVector<f64>> {
    if !(kappa2 > 0.0) || mean_spectrum.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("optimal_af needs kappa2 > 0 and a positive mean spectrum"));
    }
    Ok(DVector::from_iterator(mean_spectrum.len(), mean_spectrum.iter().map(|m| (kappa2 / m).sqrt())))
}

/// `max_i (A^i)^2 sqrt(Var[Sigma^i])`, the quantity [`optimal_af`] minimises.
pub fn af_minimax_objective(a: &[f64], var_spectrum: &[f64]) -> f64 {
    a.iter().zip(var_spectrum).map(|(a, v)| a * a * v.sqrt()).fold(f64::NEG_INFINITY, f64::max)
}

/// SGD on the fixed-support objective: each step samples one task by weight
/// and follows the gradient of its noise-averaged post-adaptation risk,
/// `A Sigma_tau A (theta - theta_tau)`. Steps decay as `lr0 / (1 + t / decay)`
/// and the second half of the iterates is averaged.
pub fn sgd_fixml(
    alpha: f64,
    support: &FixedSupport,
    pop: &TaskPopulation,
    scale: StepScale,
    steps: usize,
    lr0: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    check_dim("fixed support cols", pop.dim(), support.dim())?;
    let p = pop.dim();
    let a = support.step_matrix(alpha, scale);
    let curv: Vec<DMatrix<f64>> = pop.tasks.iter().map(|t| &a * t.covariance() * &a).collect();
    let mut rng = seeds::rng(seed);
    let mut theta = DVector::zeros(p);
    let mut avg = DVector::zeros(p);
    let burn = steps / 2;
    let decay = (steps as f64 / 100.0).max(1.0);
    for t in 0..steps {
        let i = pop.draw_index(&mut rng);
        let g = &curv[i] * (&theta - &pop.tasks[i].theta);
        theta -= g * (lr0 / (1.0 + t as f64 / decay));
        if t >= burn {
            avg += &theta;
        }
    }
    Ok(avg / (steps - burn).max(1) as f64)
}

/// Measured ingredients of the covariance-estimation, matrix-Bernstein and
/// matrix-Chernoff arguments for one draw of `m` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub m: usize,
    pub n_query: usize,
    /// `lambda_min(sum_i B~_i)`.
    pub lambda_min_sum: f64,
    /// `lambda_min(E[B])`.
    pub mu_min: f64,
    /// `||(1/m) sum_i (B_i - E[B])||`.
    pub bernstein_deviation: f64,
    /// Right-hand side of the Bernstein inequality at confidence `rho`.
    pub bernstein_bound: f64,
    /// `||B~_i - B_i||` per sampled task.
    pub per_task_cov_errors: Vec<f64>,
    /// `sqrt((p + log(2m/delta)) / n) + (p + log(2m/delta)) / n`.
    pub cov_rate: f64,
    /// `sup_tau ||theta_tau - theta*||` over the population.
    pub sup_theta_dev: f64,
    /// `||Var_tau[B]||` with `Var[B] = E[(B - E[B])^2]`.
    pub variance_norm: f64,
    /// `max_tau ||B_tau - E[B]||`.
    pub kappa_bound: f64,
    /// Average of `||A Sigma_i A||` over the sampled tasks.
    pub scaled_spectrum_mean: f64,
    /// Maximum of `||A Sigma_i A||` over the sampled tasks.
    pub scaled_spectrum_max: f64,
    /// `max_i ||B~_i||`.
    pub l_bound: f64,
    pub t1: f64,
    pub t2: f64,
    /// `sup_tau ||E[B] (theta_tau - theta*)||`.
    pub t3: f64,
    /// `||theta_hat - theta*||` for the empirical fixed-support estimate.
    pub estimation_error: f64,
    pub chernoff_holds: bool,
    /// Lower bound on `P[lambda_min_sum >= (1 - eps) m mu_min]`, clamped at 0.
    pub chernoff_probability: f64,
    pub delta: f64,
    pub rho: f64,
    pub epsilon: f64,
}

/// Chernoff failure bound `p [e^{-eps} / (1-eps)^{1-eps}]^{m mu_min / L}`,
/// returned as a success probability.
pub fn chernoff_success_bound(p: usize, m: usize, mu_min: f64, l_bound: f64, epsilon: f64) -> f64 {
    if !(l_bound > 0.0) {
        return 0.0;
    }
    let base = (-epsilon).exp() / (1.0 - epsilon).powf(1.0 - epsilon);
    (1.0 - p as f64 * base.powf(m as f64 * mu_min / l_bound)).max(0.0)
}

struct ConcentrationSetup {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    eb: DMatrix<f64>,
    theta_star: DVector<f64>,
}

fn concentration_setup(pop: &TaskPopulation, support: &FixedSupport, alpha: f64) -> Result<ConcentrationSetup> {
    check_dim("fixed support cols", pop.dim(), support.dim())?;
    let a = af_matrix(support, alpha, support.rows())?;
    let b: Vec<DMatrix<f64>> = pop.tasks.iter().map(|t| &a * t.covariance() * &a).collect();
    let eb = b.iter().zip(&pop.weights).fold(DMatrix::zeros(a.nrows(), a.nrows()), |acc, (m, w)| acc + m * *w);
    let ebt = b.iter().zip(&pop.tasks).zip(&pop.weights).fold(DVector::zeros(a.nrows()), |acc, ((m, t), w)| acc + m * &t.theta * *w);
    let theta_star = linalg::spd_solve(&eb, &ebt, "E[B]")?;
    Ok(ConcentrationSetup { a, b, eb, theta_star })
}

fn sample_btilde(a: &DMatrix<f64>, task: &RegressionTask, n_query: usize, rng: &mut Rng) -> DMatrix<f64> {
    let (xq, _) = taskspace::sample_regression_data_with(task, n_query, rng);
    a * (xq.transpose() * &xq) * a / n_query as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationParams {
    pub m: usize,
    pub n_query: usize,
    pub delta: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for ConcentrationParams {
    fn default() -> Self {
        ConcentrationParams { m: 20, n_query: 50, delta: 0.05, rho: 0.05, epsilon: 0.5 }
    }
}

impl ConcentrationParams {
    fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n_query == 0 {
            return Err(Error::invalid("concentration report needs m >= 2 and n_query >= 1"));
        }
        for (name, v) in [("delta", self.delta), ("rho", self.rho), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Draws `m` tasks from `pop` and `n_query` query rows per task, and measures
/// every ingredient of the estimation-error decomposition.
pub fn concentration_report(
    pop: &TaskPopulation,
    support: &FixedSupport,
    alpha: f64,
    params: ConcentrationParams,
    seed: u64,
) -> Result<ConcentrationReport> {
    params.validate()?;
    let setup = concentration_setup(pop, support, alpha)?;
    let p = pop.dim();
    let m = params.m;
    let mut rng = seeds::rng(seed);
    let picks: Vec<usize> = (0..m).map(|_| pop.draw_index(&mut rng)).collect();
    let btilde: Vec<DMatrix<f64>> = picks.iter().map(|&i| sample_btilde(&setup.a, &pop.tasks[i], params.n_query, &mut rng)).collect();

    let per_task_cov_errors: Vec<f64> = picks.iter().zip(&btilde).map(|(&i, bt)| linalg::sym_spectral_norm(&(bt - &setup.b[i]))).collect();
    let sum_bt = btilde.iter().fold(DMatrix::zeros(p, p), |acc, m| acc + m);
    let lambda_min_sum = linalg::lambda_min(&sum_bt);
    let mu_min = linalg::lambda_min(&setup.eb);

    let centered = picks.iter().fold(DMatrix::zeros(p, p), |acc, &i| acc + (&setup.b[i] - &setup.eb)) / m as f64;
    let bernstein_deviation = linalg::sym_spectral_norm(&centered);
    let var_b = setup.b.iter().zip(&pop.weights).fold(DMatrix::zeros(p, p), |acc, (b, w)| {
        let d = b - &setup.eb;
        acc + &d * &d * *w
    });
    let variance_norm = linalg::sym_spectral_norm(&var_b);
    let kappa_bound = setup.b.iter().map(|b| linalg::sym_spectral_norm(&(b - &setup.eb))).fold(0.0, f64::max);
    let log_term = (2.0 * p as f64 / params.rho).ln();
    let bernstein_bound = 2.0 * kappa_bound / (3.0 * m as f64) * log_term + (2.0 * log_term * variance_norm / m as f64).sqrt();

    let scaled: Vec<f64> = picks.iter().map(|&i| linalg::sym_spectral_norm(&setup.b[i])).collect();
    let l_bound = btilde.iter().map(linalg::sym_spectral_norm).fold(0.0, f64::max);
    let sup_theta_dev = pop.tasks.iter().map(|t| (&t.theta - &setup.theta_star).norm()).fold(0.0, f64::max);

    let dev = |i: usize| &pop.tasks[i].theta - &setup.theta_star;
    let t1 = (picks.iter().zip(&btilde).fold(DVector::zeros(p), |acc, (&i, bt)| acc + (bt - &setup.b[i]) * dev(i)) / m as f64).norm();
    let t2 = (picks.iter().fold(DVector::zeros(p), |acc, &i| acc + (&setup.b[i] - &setup.eb) * dev(i)) / m as f64).norm();
    let t3 = (0..pop.tasks.len()).map(|i| (&setup.eb * dev(i)).norm()).fold(0.0, f64::max);

    let rhs = picks.iter().zip(&btilde).fold(DVector::zeros(p), |acc, (&i, bt)| acc + bt * &pop.tasks[i].theta);
    let theta_hat = sum_bt.clone().pseudo_inverse(1e-12).map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))? * rhs;

    let n = params.n_query as f64;
    let r = (p as f64 + (2.0 * m as f64 / params.delta).ln()) / n;
    Ok(ConcentrationReport {
        m,
        n_query: params.n_query,
        lambda_min_sum,
        mu_min,
        bernstein_deviation,
        bernstein_bound,
        per_task_cov_errors,
        cov_rate: r.sqrt() + r,
        sup_theta_dev,
        variance_norm,
        kappa_bound,
        scaled_spectrum_mean: exec::mean(&scaled),
        scaled_spectrum_max: scaled.iter().copied().fold(0.0, f64::max),
        l_bound,
        t1,
        t2,
        t3,
        estimation_error: (theta_hat - &setup.theta_star).norm(),
        chernoff_holds: lambda_min_sum >= (1.0 - params.epsilon) * m as f64 * mu_min,
        chernoff_probability: chernoff_success_bound(p, m, mu_min, l_bound, params.epsilon),
        delta: params.delta,
        rho: params.rho,
        epsilon: params.epsilon,
    })
}

/// Frequency of the Chernoff event over repeated resampling, next to the
/// bound's predicted success probability (with `L` the largest `||B~_i||`
/// seen across all resamples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChernoffCheck {
    pub resamples: usize,
    pub observed: f64,
    pub predicted: f64,
    pub l_bound: f64,
    pub mu_min: f64,
}

pub fn chernoff_frequency(
    pop: &TaskPopulation,
    support: &FixedSupport,
    alpha: f64,
    params: ConcentrationParams,
    resamples: usize,
    seed: u64,
) -> Result<ChernoffCheck> {
    params.validate()?;
    if resamples == 0 {
        return Err(Error::invalid("resamples must be >= 1"));
    }
    let setup = concentration_setup(pop, support, alpha)?;
    let p = pop.dim();
    let mu_min = linalg::lambda_min(&setup.eb);
    let runs = exec::map_indexed(resamples, |r| {
        let mut rng = seeds::rng_for(seed, &[r as u64]);
        let mut sum = DMatrix::zeros(p, p);
        let mut l = 0.0f64;
        for _ in 0..params.m {
            let i = pop.draw_index(&mut rng);
            let bt = sample_btilde(&setup.a, &pop.tasks[i], params.n_query, &mut rng);
            l = l.max(linalg::sym_spectral_norm(&bt));
            sum += bt;
        }
        (linalg::lambda_min(&sum), l)
    });
    let threshold = (1.0 - params.epsilon) * params.m as f64 * mu_min;
    let hits = runs.iter().filter(|(lm, _)| *lm >= threshold).count();
    let l_bound = runs.iter().map(|(_, l)| *l).fold(0.0, f64::max);
    Ok(ChernoffCheck {
        resamples,
        observed: hits as f64 / resamples as f64,
        predicted: chernoff_success_bound(p, params.m, mu_min, l_bound, params.epsilon),
        l_bound,
        mu_min,
    })
}

/// One exported oracle result: operation name, digest of its inputs, outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub operation: String,
    pub inputs_hash: String,
    pub outputs: Vec<f64>,
}

impl OracleRow {
    pub fn new(operation: &str, inputs: &[f64], outputs: Vec<f64>) -> Self {
        let mut h = Sha256::new();
        h.update(operation.as_bytes());
        for v in inputs {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut inputs_hash = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(inputs_hash, "{b:02x}");
        }
        OracleRow { operation: operation.to_string(), inputs_hash, outputs }
    }
}

/// `operation,inputs_hash,outputs` with outputs `;`-separated.
pub fn oracle_rows_csv(rows: &[OracleRow]) -> String {
    let mut out = String::from("operation,inputs_hash,outputs\n");
    for r in rows {
        let outs: Vec<String> = r.outputs.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{},{},{}", r.operation, r.inputs_hash, outs.join(";"));
    }
    out
}

/// Population flattened to a vector for hashing.
pub fn population_fingerprint(pop: &TaskPopulation) -> Vec<f64> {
    let mut v = Vec::new();
    for (t, w) in pop.tasks.iter().zip(&pop.weights) {
        v.push(*w);
        v.push(t.sigma);
        v.extend(t.theta.iter());
        v.extend(t.spectrum.iter());
        v.extend(t.basis.iter());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_task() -> TaskPopulation {
        TaskPopulation::uniform(vec![
            RegressionTask::diagonal(&[1.0, 0.0], &[1.0, 2.0], 0.0),
            RegressionTask::diagonal(&[0.0, 1.0], &[3.0, 4.0], 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn risk_at_optimum_is_noise() {
        let t = RegressionTask::diagonal(&[0.3, -0.2], &[2.0, 0.5], 0.7);
        assert!((true_risk(&t.theta, &t).unwrap() - 0.5 * 0.49).abs() < 1e-15);
        let u = RegressionTask::diagonal(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 0.0);
        let eta = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(true_risk(&eta, &u).unwrap(), 0.5);
    }

    #[test]
    fn fixed_support_risk_conventions() {
        let t = RegressionTask::diagonal(&[0.3, -0.2], &[2.0, 0.5], 0.5);
        let s = FixedSupport::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 2.0, -1.0, 1.0])).unwrap();
        let total = fixed_support_risk(&t.theta, &s, &t, RiskScale::Total).unwrap();
        assert!((total - 0.5 * 3.0 * 0.25).abs() < 1e-15);
        let per = fixed_support_risk(&t.theta, &s, &t, RiskScale::PerSample).unwrap();
        assert!((per - 0.125).abs() < 1e-15);
        let zero = FixedSupport::new(DMatrix::zeros(3, 2)).unwrap();
        let a = fixed_support_risk(&DVector::from_vec(vec![5.0, 5.0]), &zero, &t, RiskScale::Total).unwrap();
        let b = fixed_support_risk(&DVector::from_vec(vec![-1.0, 2.0]), &zero, &t, RiskScale::Total).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapt_fixed_points() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]);
        let theta = DVector::from_vec(vec![0.2, 0.4]);
        let y = DVector::from_vec(vec![3.0, 1.0]);
        assert_eq!(onestep_adapt(&theta, &x, &y, 0.0, StepScale::Bare).unwrap(), theta);
        let yt = &x * &theta;
        assert_eq!(onestep_adapt(&theta, &x, &yt, 0.3, StepScale::PerSample).unwrap(), theta);
    }

    #[test]
    fn af_matrix_cases() {
        let s = FixedSupport::from_diag_gram(&[4.0, 1.0]).unwrap();
        assert_eq!(af_matrix(&s, 0.0, 3).unwrap(), DMatrix::identity(2, 2));
        let a = af_matrix(&s, 0.5, 2).unwrap();
        assert!((a[(0, 0)] - 0.0).abs() < 1e-15 && (a[(1, 1)] - 0.75).abs() < 1e-15);
        let z = FixedSupport::new(DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(af_matrix(&z, 0.9, 2).unwrap(), DMatrix::identity(2, 2));
        assert!(af_matrix(&s, 0.5, 0).is_err());
    }

    #[test]
    fn fml_single_task_and_product_population() {
        let t = RegressionTask::diagonal(&[0.7, -1.1], &[1.0, 2.0], 0.3);
        let pop = TaskPopulation::uniform(vec![t.clone()]).unwrap();
        let s = FixedSupport::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4])).unwrap();
        let th = theta_star_fml(0.5, &s, &pop, StepScale::Bare).unwrap();
        assert!((th - &t.theta).amax() < 1e-12);

        // theta independent of Sigma: every covariance paired with every theta
        let thetas = [[1.0, 0.0], [0.0, 2.0]];
        let specs = [[1.0, 2.0], [3.0, 0.5]];
        let tasks = thetas.iter().flat_map(|th| specs.iter().map(move |sp| RegressionTask::diagonal(th, sp, 0.0))).collect();
        let pop = TaskPopulation::uniform(tasks).unwrap();
        let th = theta_star_fml(0.2, &s, &pop, StepScale::Bare).unwrap();
        assert!((th - pop.mean_theta()).amax() < 1e-12);
    }

    #[test]
    fn diag_closed_form_two_tasks() {
        let m = two_task().diag_moments();
        let th = theta_star_diag(0.3, 4, &[1.0, 2.0], &m).unwrap();
        assert!((th[0] - 0.25).abs() < 1e-15);
        assert!((th[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(theta_star_diag(1.0, 1, &[1.0, 2.0], &m).is_err());
    }

    #[test]
    fn optimal_af_direct() {
        let a = optimal_af(&[1.0, 4.0], 1.0).unwrap();
        assert_eq!(a.as_slice(), &[1.0, 0.5]);
        let a = optimal_af(&[2.0, 5.0], 1.0).unwrap();
        let b = optimal_af(&[2.0, 5.0], 2.0).unwrap();
        assert!((a[0] - 0.5f64.sqrt()).abs() < 1e-15 && (b[0] - 1.0).abs() < 1e-15);
        let c = optimal_af(&[3.0, 3.0], 3.0).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0]);
        assert!(optimal_af(&[0.0, 1.0], 1.0).is_err());
        assert!(optimal_af(&[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn ml_alpha_zero_matches_fml() {
        let pop = two_task();
        let s = FixedSupport::from_diag_gram(&[1.0, 1.0]).unwrap();
        let f = theta_star_fml(0.0, &s, &pop, StepScale::Bare).unwrap();
        let e = theta_star_ml_exact(0.0, &pop, 5, StepScale::PerSample).unwrap();
        let mc = theta_star_ml(0.0, &pop, 5, 20, 1, StepScale::PerSample).unwrap();
        assert!((&f - &e.theta).amax() < 1e-12);
        assert!((&f - &mc.theta).amax() < 1e-12);
    }

    #[test]
    fn empty_population_rejected() {
        assert!(TaskPopulation::uniform(Vec::new()).is_err());
        let t = RegressionTask::diagonal(&[1.0], &[1.0], 0.0);
        assert!(TaskPopulation::new(vec![t], vec![0.5]).is_err());
    }

    #[test]
    fn oracle_rows_are_stable() {
        let a = OracleRow::new("op", &[1.0, 2.0], vec![0.5]);
        let b = OracleRow::new("op", &[1.0, 2.0], vec![0.5]);
        assert_eq!(a, b);
        assert_eq!(a.inputs_hash.len(), 16);
        assert_ne!(a.inputs_hash, OracleRow::new("op", &[1.0, 2.5], vec![]).inputs_hash);
        let csv = oracle_rows_csv(&[a]);
        assert!(csv.starts_with("operation,inputs_hash,outputs\nop,"));
    }
}
