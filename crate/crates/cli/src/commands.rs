//! Subcommand implementations. Each writes `config.lock` and its outputs into
//! the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fixpool::diagnostics::{self, EvalSetup, StabilityConfig};
use fixpool::objectives;
use fixpool::report::{LinePlot, Series, Table};
use fixpool::solvers::AlgorithmParams;
use fixpool::taskspace::{self, Dataset, SupportPool};
use fixpool::trainer::{self, Objective};

use crate::config::Config;
use crate::{oracle_suite, CliError, Diagnostic};

pub const CHECKPOINT_SUBDIR: &str = "checkpoints";

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Creates the run directory and writes `config.lock`.
fn prepare_run(cfg: &Config) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    write(&dir.join("config.lock"), &cfg.to_lock())?;
    Ok(dir)
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:05}.ckpt")
}

fn pools_csv(entries: &[(String, &SupportPool)]) -> String {
    let mut out = String::from("pool,class,indices\n");
    for (name, pool) in entries {
        for c in 0..pool.n_classes() {
            let idx: Vec<String> = pool.class_indices(c).iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{name},{c},{}", idx.join(";"));
        }
    }
    out
}

fn base_pool(cfg: &Config, train: &Dataset) -> Result<SupportPool, CliError> {
    Ok(taskspace::sample_support_pool(train, cfg.usize("k_shot")?, cfg.pool_seed()?)?)
}

pub fn cmd_train(cfg: &Config) -> Result<(), CliError> {
    let (train_d, _) = cfg.datasets()?;
    let tc = cfg.train_config(train_d.dim())?;
    tc.cfg.validate(&train_d)?;
    let base = match tc.objective {
        Objective::Fixml => Some(base_pool(cfg, &train_d)?),
        Objective::Ml => None,
    };
    let n_tracked = cfg.usize("track_pools")?;
    let tracked = match &base {
        Some(b) => diagnostics::sample_extra_pools(&train_d, b, n_tracked, tc.seed)?,
        None => (0..n_tracked)
            .map(|j| taskspace::sample_support_pool(&train_d, tc.cfg.k_shot, diagnostics::extra_pool_seed(tc.seed, j, 0)))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let dir = prepare_run(cfg)?;

    let init = trainer::init_params(&tc.embedding, tc.seed)?;
    let (w, log) = trainer::train_observed(&train_d, base.as_ref(), &tc, init, &tracked, |_| {})?;

    write(&dir.join("trajectory.csv"), &log.to_csv())?;
    trainer::save_checkpoint(&w, &dir.join("final.ckpt"))?;
    let mut entries: Vec<(String, &SupportPool)> = Vec::new();
    if let Some(b) = &base {
        entries.push(("base".into(), b));
    }
    entries.extend(tracked.iter().enumerate().map(|(j, p)| (format!("tracked_{j}"), p)));
    write(&dir.join("pools.csv"), &pools_csv(&entries))?;

    if cfg.bool("save_checkpoints")? {
        let ck = dir.join(CHECKPOINT_SUBDIR);
        if ck.exists() {
            fs::remove_dir_all(&ck).map_err(|e| CliError::Io(format!("{}: {e}", ck.display())))?;
        }
        fs::create_dir_all(&ck).map_err(|e| CliError::Io(format!("{}: {e}", ck.display())))?;
        for r in &log.records {
            trainer::save_checkpoint(&log.checkpoints[r.checkpoint], &ck.join(checkpoint_name(r.epoch)))?;
        }
    }
    let last = log.records.last().expect("initial record");
    println!("trained {} epochs: train_loss {:.4}, ml_loss {:.4}, ml_acc {:.4}", last.epoch, last.train_loss, last.ml_loss, last.ml_acc);
    Ok(())
}

fn load_params(cfg: &Config, key: &str, dataset: &Dataset, fallback: Option<PathBuf>) -> Result<AlgorithmParams, CliError> {
    let path = cfg.path(key).or(fallback).ok_or_else(|| CliError::Config(format!("missing required key {key:?}")))?;
    Ok(trainer::load_checkpoint(&path, &cfg.embedding(dataset.dim())?)?)
}

fn final_checkpoint(cfg: &Config) -> Option<PathBuf> {
    Some(cfg.run_dir().join("final.ckpt"))
}

pub fn cmd_eval(cfg: &Config) -> Result<(), CliError> {
    let (train_d, test_d) = cfg.datasets()?;
    let (split, data) = match cfg.raw("eval_split") {
        "train" => ("train", &train_d),
        "test" => ("test", &test_d),
        other => return Err(CliError::Config(format!("eval_split must be train or test, got {other:?}"))),
    };
    let w = load_params(cfg, "checkpoint", data, final_checkpoint(cfg))?;
    let task = cfg.task_config()?;
    let n = cfg.usize("eval_n_episodes")?;
    let est = objectives::ml_loss_estimate(&w, data, &task, cfg.head()?, n, cfg.seed_or_default("eval_seed")?)?;
    let dir = prepare_run(cfg)?;
    let csv = format!(
        "split,n_episodes,loss,loss_hw95,acc,acc_hw95\n{split},{},{},{},{},{}\n",
        est.n_episodes, est.mean, est.half_width_95, est.accuracy_mean, est.accuracy_half_width_95
    );
    write(&dir.join("eval.csv"), &csv)?;
    println!(
        "{split}: loss {:.4} +- {:.4}, accuracy {:.4} +- {:.4} over {} episodes",
        est.mean, est.half_width_95, est.accuracy_mean, est.accuracy_half_width_95, est.n_episodes
    );
    Ok(())
}

fn write_outputs(dir: &Path, stem: &str, table: &Table, plot: Option<&LinePlot>) -> Result<(), CliError> {
    write(&dir.join(format!("{stem}.csv")), &table.to_csv())?;
    if let Some(p) = plot {
        write(&dir.join(format!("{stem}.svg")), &p.to_svg())?;
    }
    Ok(())
}

/// Snapshot checkpoints in `dir`, ordered by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse::<usize>().ok()) {
            out.push((epoch, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Io(format!("no epoch_*.ckpt files in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_diagnose(cfg: &Config, which: Diagnostic) -> Result<(), CliError> {
    let (train_d, test_d) = cfg.datasets()?;
    let task = cfg.task_config()?;
    task.validate(&train_d)?;
    let head = cfg.head()?;
    let n_eval = cfg.usize("diag_episodes")?;
    let seed = cfg.seed_or_default("diag_seed")?;
    match which {
        Diagnostic::Interpolate => {
            if cfg.path("checkpoint_fml").is_none() || cfg.path("checkpoint_ml").is_none() {
                return Err(CliError::Config("interpolate requires checkpoint_fml and checkpoint_ml".into()));
            }
            let w_fml = load_params(cfg, "checkpoint_fml", &train_d, None)?;
            let w_ml = load_params(cfg, "checkpoint_ml", &train_d, None)?;
            let train_eval = EvalSetup { dataset: &train_d, cfg: task, head, n_episodes: n_eval, seed };
            let test_eval = EvalSetup { dataset: &test_d, ..train_eval };
            let alphas = diagnostics::interpolation_alphas(cfg.usize("interp_points")?);
            let curve = diagnostics::interpolate_losses(&w_fml, &w_ml, &alphas, &train_eval, &test_eval)?;
            let dir = prepare_run(cfg)?;
            write_outputs(&dir, "interpolation", &curve.to_table(), Some(&curve.to_plot()))
        }
        Diagnostic::Pools => {
            let base = base_pool(cfg, &train_d)?;
            let ck_dir = cfg.path("checkpoint_dir").unwrap_or_else(|| cfg.run_dir().join(CHECKPOINT_SUBDIR));
            let spec = cfg.embedding(train_d.dim())?;
            let listed = list_checkpoints(&ck_dir)?;
            let checkpoints = listed.iter().map(|(_, p)| trainer::load_checkpoint(p, &spec)).collect::<Result<Vec<_>, _>>()?;
            let n_extra = cfg.usize("n_extra_pools")?;
            let pt = diagnostics::multi_pool_trajectory(&checkpoints, &train_d, &base, n_extra, &task, head, n_eval, seed)?;
            let epochs: Vec<f64> = listed.iter().map(|(e, _)| *e as f64).collect();
            let mut table = pt.to_table();
            table.headers.insert(1, "epoch".into());
            for (row, e) in table.rows.iter_mut().zip(&epochs) {
                row.insert(1, *e);
            }
            let dir = prepare_run(cfg)?;
            write_outputs(&dir, "pool_trajectory", &table, Some(&pt.to_plot(&epochs)))
        }
        Diagnostic::Tic => {
            let w = load_params(cfg, "checkpoint", &train_d, final_checkpoint(cfg))?;
            let mut r = diagnostics::tic_ratio(&w, &train_d, &task, head, cfg.usize("tic_episodes")?, seed)?;
            r.gen_gap = Some(diagnostics::generalization_gap(&w, &train_d, &test_d, &task, head, n_eval, seed)?.gap);
            let dir = prepare_run(cfg)?;
            println!("tr(C)/tr(F) = {:.4} (train loss {:.4}, gap {:.4})", r.ratio, r.train_loss, r.gen_gap.unwrap_or(f64::NAN));
            write_outputs(&dir, "tic", &r.to_table(), None)
        }
        Diagnostic::Gap => {
            let w = load_params(cfg, "checkpoint", &train_d, final_checkpoint(cfg))?;
            let g = diagnostics::generalization_gap(&w, &train_d, &test_d, &task, head, n_eval, seed)?;
            let mut t = Table::new(&["gap", "train_loss", "train_hw95", "test_loss", "test_hw95"]);
            t.push(vec![g.gap, g.train.mean, g.train.half_width_95, g.test.mean, g.test.half_width_95]);
            let dir = prepare_run(cfg)?;
            println!("generalization gap {:.4}", g.gap);
            write_outputs(&dir, "gap", &t, None)
        }
        Diagnostic::Stability => {
            let sc = StabilityConfig {
                cfg: task,
                head,
                embedding: cfg.embedding(train_d.dim())?,
                n_tasks: cfg.usize("stability_tasks")?,
                n_probe: cfg.usize("stability_probes")?,
                steps: cfg.usize("stability_steps")?,
                lr: cfg.f64("stability_lr")?,
                momentum: cfg.f64("momentum")?,
            };
            let r = diagnostics::stability_estimate(&train_d, &sc, cfg.usize("n_perturbations")?, seed)?;
            let xs: Vec<f64> = (0..r.per_perturbation.len()).map(|i| i as f64).collect();
            let plot = LinePlot::new("leave-one-task-out probe loss change", "removed task", "max |loss difference|").with(Series::new(
                "blue: per-perturbation",
                "blue",
                xs,
                r.per_perturbation.clone(),
            ));
            let dir = prepare_run(cfg)?;
            println!("beta_hat {:.6} (lower estimate)", r.beta_hat);
            write_outputs(&dir, "stability", &r.to_table(), Some(&plot))
        }
    }
}

pub fn cmd_oracle(cfg: &Config) -> Result<(), CliError> {
    let rows = oracle_suite::run_suites(cfg)?;
    let dir = prepare_run(cfg)?;
    write(&dir.join("oracle.csv"), &fixpool::oracle::oracle_rows_csv(&rows))?;
    println!("wrote {} oracle rows", rows.len());
    Ok(())
}

/// `(log10 #support pools, log10 per-task reduction factor)`.
pub fn count_pools(n_classes: usize, per_class: usize, k: usize, n_way: usize) -> Result<(f64, f64), CliError> {
    Ok((taskspace::count_support_pools_log10(n_classes, per_class, k)?, taskspace::count_reduction_factor_log10(per_class, k, n_way)?))
}
