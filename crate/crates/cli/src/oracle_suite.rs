//! The linear-regression oracle suites behind `fixpool oracle`.

use fixpool::oracle::{self, ConcentrationParams, FixedSupport, OracleRow, StepScale, TaskBatch, TaskPopulation};
use fixpool::seeds::{self, stream};
use fixpool::taskspace::{NoiseLaw, RegressionMetaDistribution, RegressionTask, SpectrumLaw};
use rand::Rng as _;

use crate::config::Config;
use crate::CliError;

const SCALE: StepScale = StepScale::PerSample;
const INVARIANCE_GRAMS: usize = 10;

/// Two diagonal tasks, `theta = e_1, e_2` with spectra `(1, 2)` and `(3, 4)`,
/// whose fixed-support optimum is `(0.25, 2/3)` for any diagonal support.
pub fn two_task_population(sigma: f64) -> Result<TaskPopulation, CliError> {
    Ok(TaskPopulation::uniform(vec![
        RegressionTask::diagonal(&[1.0, 0.0], &[1.0, 2.0], sigma),
        RegressionTask::diagonal(&[0.0, 1.0], &[3.0, 4.0], sigma),
    ])?)
}

pub fn population(cfg: &Config, seed: u64) -> Result<TaskPopulation, CliError> {
    let noise = cfg.f64("oracle_noise")?;
    match cfg.raw("oracle_population") {
        "two_task" => two_task_population(noise),
        "meta" => {
            let p = cfg.usize("oracle_dim")?;
            let mut meta = RegressionMetaDistribution::simple(vec![0.0; p], vec![cfg.f64("oracle_theta_scale")?; p], vec![1.0; p]);
            meta.spectrum = SpectrumLaw::Uniform { low: cfg.f64("oracle_spectrum_low")?, high: cfg.f64("oracle_spectrum_high")? };
            meta.noise = NoiseLaw::Fixed(noise);
            Ok(TaskPopulation::from_meta(&meta, cfg.usize("oracle_tasks")?, seeds::derive(seed, &[stream::TASK]))?)
        }
        other => Err(CliError::Config(format!("oracle_population must be two_task or meta, got {other:?}"))),
    }
}

fn vec_of<'a>(v: impl IntoIterator<Item = &'a f64>) -> Vec<f64> {
    v.into_iter().copied().collect()
}

/// Rows for the optimum, empirical-minimiser, diagonal, optimal-support and
/// concentration suites.
pub fn run_suites(cfg: &Config) -> Result<Vec<OracleRow>, CliError> {
    let seed = cfg.seed_or_default("oracle_seed")?;
    let pop = population(cfg, seed)?;
    let alpha = cfg.f64("oracle_alpha")?;
    let n = cfg.usize("oracle_support_rows")?;
    let support = FixedSupport::sample(&pop.tasks()[0], n, seeds::derive(seed, &[stream::POOL]))?;

    let mut inputs = oracle::population_fingerprint(&pop);
    inputs.extend([alpha, n as f64]);
    inputs.extend(support.x().iter());
    let row = |op: &str, extra: &[f64], out: Vec<f64>| {
        let mut all = inputs.clone();
        all.extend_from_slice(extra);
        OracleRow::new(op, &all, out)
    };
    let mut rows = Vec::new();

    // optimal solutions
    let fml = oracle::theta_star_fml(alpha, &support, &pop, SCALE)?;
    rows.push(row("opt_sol.theta_star_fml", &[], vec_of(&fml)));
    rows.push(row("opt_sol.hessian_fml", &[], vec_of(&oracle::hessian_fml(alpha, &support, &pop, SCALE)?)));
    let mc = cfg.usize("oracle_mc")?;
    let ml = oracle::theta_star_ml(alpha, &pop, n, mc, seeds::derive(seed, &[stream::EVAL]), SCALE)?;
    let mut out = vec_of(&ml.theta);
    out.extend(ml.half_width_95.iter());
    rows.push(row("opt_sol.theta_star_ml_mc", &[mc as f64], out));
    let exact = oracle::theta_star_ml_exact(alpha, &pop, n, SCALE)?;
    rows.push(row("opt_sol.theta_star_ml_exact", &[], vec_of(&exact.theta)));

    // empirical minimiser over tasks cycled in population order
    let m = cfg.usize("oracle_empirical_tasks")?;
    let nq = cfg.usize("oracle_query_rows")?;
    let batches = (0..m)
        .map(|i| TaskBatch::sample(&pop.tasks()[i % pop.tasks().len()], n, nq, seeds::derive(seed, &[stream::DATA, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let hat = oracle::theta_hat_ml_empirical(&batches, alpha, SCALE, true)?;
    let grad = oracle::empirical_ml_gradient(&hat, &batches, alpha, SCALE, true)?;
    rows.push(row("empirical_sol.theta_hat", &[m as f64, nq as f64], vec_of(&hat)));
    rows.push(row("empirical_sol.gradient_norm", &[m as f64, nq as f64], vec![grad.norm()]));

    // diagonal populations: the optimum does not depend on the diagonal gram
    let moments = pop.diag_moments();
    let diag_gram = vec_of(&support.gram().diagonal());
    let reference = oracle::theta_star_diag(alpha, n, &diag_gram, &moments)?;
    rows.push(row("diagonal.theta_star", &[], vec_of(&reference)));
    let mut rng = seeds::rng_for(seed, &[stream::PROBE]);
    let mut max_dev: f64 = 0.0;
    for _ in 0..INVARIANCE_GRAMS {
        let g: Vec<f64> = (0..pop.dim()).map(|_| rng.random_range(0.1..5.0)).collect();
        let a = rng.random_range(0.01..0.5);
        let d = oracle::theta_star_diag(a, n, &g, &moments)?;
        max_dev = max_dev.max((&d - &reference).amax());
    }
    rows.push(row("diagonal.invariance_max_dev", &[INVARIANCE_GRAMS as f64], vec![max_dev]));

    // optimal fixed support
    let kappa2 = cfg.f64("oracle_kappa2")?;
    let mean_spectrum = vec_of(&moments.mean_spectrum);
    let var_spectrum = vec_of(&moments.var_spectrum);
    let af = oracle::optimal_af(&mean_spectrum, kappa2)?;
    let af_vec = vec_of(&af);
    rows.push(row("optimal_af.a", &[kappa2], af_vec.clone()));
    rows.push(row("optimal_af.objective", &[kappa2], vec![oracle::af_minimax_objective(&af_vec, &var_spectrum)]));

    // concentration ingredients
    let params = ConcentrationParams::default();
    let r = oracle::concentration_report(&pop, &support, alpha, params, seeds::derive(seed, &[stream::TASK, 1]))?;
    rows.push(row(
        "concentration.report",
        &[params.m as f64, params.n_query as f64, params.delta, params.rho, params.epsilon],
        vec![
            r.lambda_min_sum,
            r.mu_min,
            r.bernstein_deviation,
            r.bernstein_bound,
            r.cov_rate,
            r.sup_theta_dev,
            r.variance_norm,
            r.kappa_bound,
            r.l_bound,
            r.t1,
            r.t2,
            r.t3,
            r.estimation_error,
            r.chernoff_probability,
            f64::from(u8::from(r.chernoff_holds)),
        ],
    ));
    Ok(rows)
}
