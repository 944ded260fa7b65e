//! Flat `key = value` experiment configuration.
//!
//! Every key has a default (or is optional); unknown and repeated keys are
//! rejected. Path-valued keys are resolved against the config file's
//! directory at load time, so the written `config.lock` holds absolute paths
//! and can be rerun from anywhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fixpool::solvers::{EmbeddingSpec, HeadKind};
use fixpool::taskspace::{self, Dataset, GaussianSpec, SplitTag, TaskConfig};
use fixpool::trainer::{self, Objective, TrainConfig};

use crate::CliError;

/// `(key, default)`; an empty default marks an optional key.
const KEYS: &[(&str, &str)] = &[
    ("run_dir", "run"),
    ("seed", "0"),
    ("workers", "0"),
    // data
    ("data", "synthetic"),
    ("n_classes", "15"),
    ("per_class", "600"),
    ("dim", "8"),
    ("class_spread", "2"),
    ("within_noise", "1"),
    ("data_seed", "0"),
    ("n_train_classes", "10"),
    ("train_csv", ""),
    ("test_csv", ""),
    // task
    ("n_way", "5"),
    ("k_shot", "1"),
    ("q_query", "5"),
    // model
    ("solver", "protonet"),
    ("ridge_lambda", "1"),
    ("embedding", "linear"),
    ("embedding_dim", "8"),
    ("hidden_dims", ""),
    // training
    ("objective", "ml"),
    ("pool_seed", ""),
    ("epochs", "60"),
    ("episodes_per_epoch", "100"),
    ("task_batch", "4"),
    ("lr", "0.05"),
    ("lr_schedule", ""),
    ("momentum", "0.9"),
    ("eval_every", "1"),
    ("eval_episodes", "200"),
    ("track_pools", "0"),
    ("save_checkpoints", "true"),
    // evaluation
    ("checkpoint", ""),
    ("eval_split", "test"),
    ("eval_n_episodes", "2000"),
    ("eval_seed", ""),
    // diagnostics
    ("checkpoint_fml", ""),
    ("checkpoint_ml", ""),
    ("checkpoint_dir", ""),
    ("interp_points", "25"),
    ("diag_episodes", "500"),
    ("diag_seed", ""),
    ("n_extra_pools", "10"),
    ("tic_episodes", "1000"),
    ("stability_tasks", "20"),
    ("stability_probes", "20"),
    ("stability_steps", "50"),
    ("stability_lr", "0.05"),
    ("n_perturbations", "5"),
    // linear-regression oracle
    ("oracle_population", "two_task"),
    ("oracle_tasks", "5"),
    ("oracle_dim", "3"),
    ("oracle_theta_scale", "1"),
    ("oracle_spectrum_low", "0.5"),
    ("oracle_spectrum_high", "2"),
    ("oracle_noise", "0.1"),
    ("oracle_alpha", "0.1"),
    ("oracle_support_rows", "10"),
    ("oracle_mc", "20000"),
    ("oracle_empirical_tasks", "4000"),
    ("oracle_query_rows", "20"),
    ("oracle_kappa2", "1"),
    ("oracle_seed", ""),
];

const PATH_KEYS: &[&str] = &["run_dir", "train_csv", "test_csv", "checkpoint", "checkpoint_fml", "checkpoint_ml", "checkpoint_dir"];

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a).trim()
}

fn absolute(base: &Path, value: &str) -> PathBuf {
    let p = Path::new(value);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    normalize(&joined)
}

/// Lexical `.`/`..` removal (the target need not exist yet).
fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

impl Config {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let base = if base_dir.is_absolute() {
            base_dir.to_path_buf()
        } else {
            std::env::current_dir().map_err(|e| CliError::Io(format!("current directory: {e}")))?.join(base_dir)
        };
        let mut given = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return Err(CliError::Config(format!("line {}: unknown key {k:?}", no + 1)));
            }
            if given.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: key {k:?} given twice", no + 1)));
            }
        }
        let mut values = BTreeMap::new();
        for (k, default) in KEYS {
            let v = given.remove(*k).unwrap_or_else(|| default.to_string());
            let v = if PATH_KEYS.contains(k) && !v.is_empty() { absolute(&base, &v).to_string_lossy().into_owned() } else { v };
            values.insert(k.to_string(), v);
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Config::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every key in declaration order; optional keys left unset are omitted.
    pub fn to_lock(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for (k, _) in KEYS {
            let v = &self.values[*k];
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn opt_raw(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.opt_raw(key).ok_or_else(|| CliError::Config(format!("missing required key {key:?}")))?;
        v.parse().map_err(|_| CliError::Config(format!("key {key:?}: cannot parse {v:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse_value(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parse_value(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse_value(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Config(format!("key {key:?} must be finite")))
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parse_value(key)
    }

    /// An optional seed key, falling back to `seed`.
    pub fn seed_or_default(&self, key: &str) -> Result<u64, CliError> {
        if self.opt_raw(key).is_some() {
            self.u64(key)
        } else {
            self.u64("seed")
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.opt_raw(key).map(PathBuf::from)
    }

    pub fn run_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("run_dir"))
    }

    /// Worker count: `FIXPOOL_WORKERS` if set, else the `workers` key
    /// (0 = all cores).
    pub fn workers(&self) -> Result<usize, CliError> {
        match std::env::var("FIXPOOL_WORKERS") {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("FIXPOOL_WORKERS: cannot parse {v:?}"))),
            Err(_) => self.usize("workers"),
        }
    }

    pub fn task_config(&self) -> Result<TaskConfig, CliError> {
        Ok(TaskConfig::new(self.usize("n_way")?, self.usize("k_shot")?, self.usize("q_query")?))
    }

    pub fn head(&self) -> Result<HeadKind, CliError> {
        match self.raw("solver") {
            "protonet" => Ok(HeadKind::ProtoNet),
            "ridge" => Ok(HeadKind::Ridge { lambda: self.f64("ridge_lambda")? }),
            other => Err(CliError::Config(format!("unknown solver {other:?} (protonet or ridge)"))),
        }
    }

    pub fn embedding(&self, input_dim: usize) -> Result<EmbeddingSpec, CliError> {
        let out = self.usize("embedding_dim")?;
        let spec = match self.raw("embedding") {
            "identity" => EmbeddingSpec::identity(input_dim),
            "linear" => EmbeddingSpec::linear(input_dim, out),
            "mlp" => {
                let hidden = self
                    .raw("hidden_dims")
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CliError::Config("hidden_dims must be a comma-separated list of sizes".into()))?;
                EmbeddingSpec::mlp(input_dim, hidden, out)
            }
            other => return Err(CliError::Config(format!("unknown embedding {other:?} (identity, linear or mlp)"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        Ok(self.raw("objective").parse::<Objective>()?)
    }

    /// `epoch:lr` pairs, or the default single-drop schedule from `lr`.
    pub fn lr_schedule(&self) -> Result<Vec<(usize, f64)>, CliError> {
        let epochs = self.usize("epochs")?;
        match self.opt_raw("lr_schedule") {
            None => Ok(trainer::default_schedule(self.f64("lr")?, epochs)),
            Some(s) => s
                .split(',')
                .map(|part| {
                    let (e, lr) =
                        part.split_once(':').ok_or_else(|| CliError::Config(format!("lr_schedule entry {part:?} is not epoch:lr")))?;
                    let e = e.trim().parse::<usize>();
                    let lr = lr.trim().parse::<f64>();
                    match (e, lr) {
                        (Ok(e), Ok(lr)) => Ok((e, lr)),
                        _ => Err(CliError::Config(format!("lr_schedule entry {part:?} is not epoch:lr"))),
                    }
                })
                .collect(),
        }
    }

    pub fn pool_seed(&self) -> Result<u64, CliError> {
        if self.opt_raw("pool_seed").is_none() {
            return Err(CliError::Config("objective = fixml requires the pool_seed key".into()));
        }
        self.u64("pool_seed")
    }

    pub fn train_config(&self, input_dim: usize) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::new(self.objective()?, self.task_config()?, self.head()?, self.embedding(input_dim)?);
        c.epochs = self.usize("epochs")?;
        c.episodes_per_epoch = self.usize("episodes_per_epoch")?;
        c.task_batch = self.usize("task_batch")?;
        c.lr_schedule = self.lr_schedule()?;
        c.momentum = self.f64("momentum")?;
        c.seed = self.u64("seed")?;
        c.eval_every = self.usize("eval_every")?;
        c.eval_episodes = self.usize("eval_episodes")?;
        c.validate()?;
        Ok(c)
    }

    /// Train and test class sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match self.raw("data") {
            "synthetic" => {
                let spec = GaussianSpec {
                    n_classes: self.usize("n_classes")?,
                    per_class: self.usize("per_class")?,
                    dim: self.usize("dim")?,
                    class_spread: self.f64("class_spread")?,
                    within_noise: self.f64("within_noise")?,
                };
                let all = taskspace::generate_gaussian_dataset(spec, self.u64("data_seed")?)?;
                Ok(all.split_classes(self.usize("n_train_classes")?, SplitTag::Train, SplitTag::Test)?)
            }
            "csv" => {
                let train = self.path("train_csv").ok_or_else(|| CliError::Config("data = csv requires train_csv".into()))?;
                let test = self.path("test_csv").ok_or_else(|| CliError::Config("data = csv requires test_csv".into()))?;
                Ok((Dataset::load_csv(&train, SplitTag::Train)?, Dataset::load_csv(&test, SplitTag::Test)?))
            }
            other => Err(CliError::Config(format!("unknown data source {other:?} (synthetic or csv)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = Config::parse("# comment\nepochs = 3  # trailing\nobjective=fixml\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(c.usize("epochs").unwrap(), 3);
        assert_eq!(c.raw("run_dir"), "/tmp/x/run");
        assert!(c.pool_seed().is_err());
        let lock = c.to_lock();
        assert!(lock.contains("epochs = 3\n"));
        assert!(!lock.contains("pool_seed"));
        assert_eq!(Config::parse(&lock, Path::new("/elsewhere")).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(matches!(Config::parse("bogus = 1", Path::new("/")), Err(CliError::Config(_))));
        assert!(matches!(Config::parse("seed = 1\nseed = 2", Path::new("/")), Err(CliError::Config(_))));
        assert!(matches!(Config::parse("seed 1", Path::new("/")), Err(CliError::Config(_))));
    }

    #[test]
    fn schedule_parsing() {
        let c = Config::parse("epochs = 10\nlr_schedule = 0:0.1, 5:0.01", Path::new("/")).unwrap();
        assert_eq!(c.lr_schedule().unwrap(), vec![(0, 0.1), (5, 0.01)]);
        let c = Config::parse("epochs = 10\nlr = 0.2", Path::new("/")).unwrap();
        assert_eq!(c.lr_schedule().unwrap(), trainer::default_schedule(0.2, 10));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let c = Config::parse("run_dir = ../out\ncheckpoint = a/b.ckpt", Path::new("/data/cfg")).unwrap();
        assert_eq!(c.run_dir(), PathBuf::from("/data/out"));
        assert_eq!(c.path("checkpoint"), Some(PathBuf::from("/data/cfg/a/b.ckpt")));
    }
}
