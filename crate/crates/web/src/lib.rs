//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every op returns plain text so the page needs no glue beyond
//! `wasm-bindgen`'s generated loader. The `*_text` functions are the same ops
//! without the JavaScript error wrapper.

use std::fmt::Write as _;

use fixpool::oracle::{self, FixedSupport, StepScale, TaskPopulation};
use fixpool::taskspace::{self, Episode, GaussianSpec, RegressionTask, TaskConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: fixpool::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// log10 of the number of support pools and of the per-task reduction factor.
#[wasm_bindgen]
pub fn count_pools(n_classes: usize, per_class: usize, k_shot: usize, n_way: usize) -> Result<String, JsError> {
    count_pools_text(n_classes, per_class, k_shot, n_way).map_err(js_err)
}

pub fn count_pools_text(n_classes: usize, per_class: usize, k_shot: usize, n_way: usize) -> fixpool::Result<String> {
    let pools = taskspace::count_support_pools_log10(n_classes, per_class, k_shot)?;
    let reduction = taskspace::count_reduction_factor_log10(per_class, k_shot, n_way)?;
    Ok(format!("support pools: 10^{pools:.1}\nepisodes per class set shrink by 10^{reduction:.1} once the pool is fixed"))
}

fn describe(ep: &Episode) -> String {
    let mut out = String::new();
    for (local, class) in ep.classes.iter().enumerate() {
        let pick = |items: &[taskspace::EpisodeItem]| {
            items.iter().filter(|i| i.label == local).map(|i| i.source.index.to_string()).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "class {class:>3}: support [{}]  query [{}]", pick(&ep.support), pick(&ep.query));
    }
    out
}

/// Draws one episode from a synthetic dataset, either freely (episodic) or
/// with supports taken from the pool drawn with `pool_seed`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sample_episode(
    n_classes: usize,
    per_class: usize,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    seed: u64,
    fixed_pool: bool,
    pool_seed: u64,
) -> Result<String, JsError> {
    sample_episode_text(n_classes, per_class, n_way, k_shot, q_query, seed, fixed_pool.then_some(pool_seed)).map_err(js_err)
}

pub fn sample_episode_text(
    n_classes: usize,
    per_class: usize,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    seed: u64,
    pool_seed: Option<u64>,
) -> fixpool::Result<String> {
    let spec = GaussianSpec { n_classes, per_class, dim: 1, class_spread: 1.0, within_noise: 1.0 };
    let data = taskspace::generate_gaussian_dataset(spec, 0)?;
    let cfg = TaskConfig::new(n_way, k_shot, q_query);
    let ep = match pool_seed {
        Some(ps) => {
            let pool = taskspace::sample_support_pool(&data, k_shot, ps)?;
            taskspace::sample_episode_from_pool(&data, &pool, &cfg, seed)?
        }
        None => taskspace::sample_episode_ml(&data, &cfg, seed)?,
    };
    Ok(describe(&ep))
}

/// Fixed-support and episodic optima on the two-task diagonal population
/// (`theta = e_1` with spectrum `(1, 2)`, `theta = e_2` with spectrum `(3, 4)`).
#[wasm_bindgen]
pub fn two_task_oracle(alpha: f64, g0: f64, g1: f64, n_support: usize) -> Result<String, JsError> {
    two_task_oracle_text(alpha, g0, g1, n_support).map_err(js_err)
}

pub fn two_task_oracle_text(alpha: f64, g0: f64, g1: f64, n_support: usize) -> fixpool::Result<String> {
    let pop = TaskPopulation::uniform(vec![
        RegressionTask::diagonal(&[1.0, 0.0], &[1.0, 2.0], 0.0),
        RegressionTask::diagonal(&[0.0, 1.0], &[3.0, 4.0], 0.0),
    ])?;
    let support = FixedSupport::from_diag_gram(&[g0, g1])?;
    let scale = StepScale::PerSample;
    let fml = oracle::theta_star_fml(alpha, &support, &pop, scale)?;
    let ml = oracle::theta_star_ml_exact(alpha, &pop, n_support, scale)?;
    Ok(format!("fixed support optimum: ({:.6}, {:.6})\nepisodic optimum:      ({:.6}, {:.6})", fml[0], fml[1], ml.theta[0], ml.theta[1]))
}
