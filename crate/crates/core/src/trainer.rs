//! Momentum SGD over task batches for the episodic and fixed-pool objectives,
//! with snapshots, trajectory logging and a binary checkpoint format.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::exec;
use crate::objectives::{self, LossEstimate};
use crate::seeds::{self, stream};
use crate::solvers::{AlgorithmParams, EmbeddingSpec, HeadKind};
use crate::taskspace::{self, Dataset, Episode, SupportPool, TaskConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ml,
    Fixml,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Ml => "ml",
            Objective::Fixml => "fixml",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(Objective::Ml),
            "fixml" => Ok(Objective::Fixml),
            other => Err(Error::invalid(format!("unknown objective {other:?} (expected ml or fixml)"))),
        }
    }
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_TASK_BATCH: usize = 4;
pub const DEFAULT_EVAL_EPISODES: usize = 200;
/// Losses above this multiple of the initial loss abort training.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Constant `lr` with a single x0.1 drop at 60% of the epochs.
pub fn default_schedule(lr: f64, epochs: usize) -> Vec<(usize, f64)> {
    let drop = (epochs * 3).div_ceil(5);
    if drop == 0 {
        vec![(0, lr)]
    } else {
        vec![(0, lr), (drop, 0.1 * lr)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub task_batch: usize,
    /// Piecewise-constant `(first epoch, learning rate)` list.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Episodes per objective estimate at each snapshot.
    pub eval_episodes: usize,
    pub cfg: TaskConfig,
    pub solver: HeadKind,
    pub embedding: EmbeddingSpec,
}

impl TrainConfig {
    pub fn new(objective: Objective, cfg: TaskConfig, solver: HeadKind, embedding: EmbeddingSpec) -> Self {
        let epochs = 60;
        TrainConfig {
            objective,
            epochs,
            episodes_per_epoch: 100,
            task_batch: DEFAULT_TASK_BATCH,
            lr_schedule: default_schedule(0.1, epochs),
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            eval_every: 1,
            eval_episodes: DEFAULT_EVAL_EPISODES,
            cfg,
            solver,
            embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_epoch == 0 || self.task_batch == 0 || self.eval_every == 0 {
            return Err(Error::invalid("episodes_per_epoch, task_batch and eval_every must be positive"));
        }
        if self.eval_episodes < 2 {
            return Err(Error::invalid("eval_episodes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::invalid("lr_schedule must start at epoch 0")),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("lr_schedule epochs must be strictly increasing"));
        }
        if self.lr_schedule.iter().any(|(_, lr)| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::invalid("learning rates must be finite and >= 0"));
        }
        self.solver.validate()?;
        self.embedding.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(e, _)| *e <= epoch).last().map_or(0.0, |(_, lr)| *lr)
    }

    /// Gradient steps per epoch (`episodes_per_epoch / task_batch`, at least 1).
    pub fn steps_per_epoch(&self) -> usize {
        (self.episodes_per_epoch / self.task_batch).max(1)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &EmbeddingSpec, seed: u64) -> Result<AlgorithmParams> {
    spec.validate()?;
    let mut rng = seeds::rng_for(seed, &[stream::INIT]);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    AlgorithmParams::new(spec.clone(), values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    /// Estimate of the objective being optimised.
    pub train_loss: f64,
    pub ml_loss: f64,
    pub ml_acc: f64,
    /// Fixed-pool estimates for the tracked pools, in order.
    pub pool_losses: Vec<f64>,
    /// Mean task-batch loss over the epoch (the initial estimate at epoch 0).
    pub batch_loss: f64,
    pub wall_seconds: f64,
    /// Index into [`TrajectoryLog::checkpoints`].
    pub checkpoint: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
    pub checkpoints: Vec<AlgorithmParams>,
}

impl TrajectoryLog {
    /// `epoch,train_loss,ml_loss,ml_acc,pool_0_loss,...` (wall time omitted
    /// so reruns are byte-identical).
    pub fn to_csv(&self) -> String {
        let n_pools = self.records.first().map_or(0, |r| r.pool_losses.len());
        let mut out = String::from("epoch,train_loss,ml_loss,ml_acc");
        for i in 0..n_pools {
            out.push_str(&format!(",pool_{i}_loss"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}", r.epoch, r.train_loss, r.ml_loss, r.ml_acc));
            for l in &r.pool_losses {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn ml_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ml_loss).collect()
    }
}

/// Events surfaced to a training observer.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// A training episode about to enter a task batch.
    Episode {
        epoch: usize,
        step: usize,
        episode: &'a Episode,
    },
    Record(&'a TrajectoryRecord),
}

/// Seed for the `b`-th episode of `step` in `epoch`.
pub fn train_episode_seed(seed: u64, epoch: usize, step: usize, b: usize) -> u64 {
    seeds::derive(seed, &[stream::TRAIN, epoch as u64, step as u64, b as u64])
}

/// Root seed of the train-objective estimates.
pub fn train_estimate_seed(seed: u64) -> u64 {
    seeds::derive(seed, &[stream::EVAL, 0])
}

/// Root seed of the held-out episodic estimates.
pub fn ml_estimate_seed(seed: u64) -> u64 {
    seeds::derive(seed, &[stream::EVAL, 1])
}

/// Root seed of the tracked-pool estimates.
pub fn pool_estimate_seed(seed: u64) -> u64 {
    seeds::derive(seed, &[stream::EVAL, 2])
}

struct Snapshotter<'a> {
    dataset: &'a Dataset,
    pool: Option<&'a SupportPool>,
    tracked: &'a [SupportPool],
    config: &'a TrainConfig,
}

impl Snapshotter<'_> {
    fn estimate(&self, w: &AlgorithmParams, pool: Option<&SupportPool>, seed: u64) -> Result<LossEstimate> {
        let c = self.config;
        match pool {
            Some(p) => objectives::fixml_loss_estimate(w, self.dataset, p, &c.cfg, c.solver, c.eval_episodes, seed),
            None => objectives::ml_loss_estimate(w, self.dataset, &c.cfg, c.solver, c.eval_episodes, seed),
        }
    }

    fn record(
        &self,
        w: &AlgorithmParams,
        epoch: usize,
        batch_loss: Option<f64>,
        checkpoint: usize,
        start: std::time::Instant,
    ) -> Result<TrajectoryRecord> {
        let seed = self.config.seed;
        let train = self.estimate(w, self.pool, train_estimate_seed(seed))?;
        let ml = self.estimate(w, None, ml_estimate_seed(seed))?;
        let pool_losses =
            self.tracked.iter().map(|p| self.estimate(w, Some(p), pool_estimate_seed(seed)).map(|e| e.mean)).collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryRecord {
            epoch,
            train_loss: train.mean,
            ml_loss: ml.mean,
            ml_acc: ml.accuracy_mean,
            pool_losses,
            batch_loss: batch_loss.unwrap_or(train.mean),
            wall_seconds: start.elapsed().as_secs_f64(),
            checkpoint,
        })
    }
}

/// Trains from [`init_params`] with no tracked pools and no observer.
pub fn train(dataset: &Dataset, pool: Option<&SupportPool>, config: &TrainConfig) -> Result<(AlgorithmParams, TrajectoryLog)> {
    let init = init_params(&config.embedding, config.seed)?;
    train_observed(dataset, pool, config, init, &[], |_| {})
}

/// Momentum SGD from `init`; `tracked` pools are evaluated at every snapshot.
///
/// Snapshots are taken at epoch 0, every `eval_every` epochs and at the final
/// epoch. Each gradient step averages `task_batch` episode gradients computed
/// against the same parameter snapshot.
pub fn train_observed(
    dataset: &Dataset,
    pool: Option<&SupportPool>,
    config: &TrainConfig,
    init: AlgorithmParams,
    tracked: &[SupportPool],
    mut observe: impl FnMut(TrainEvent<'_>),
) -> Result<(AlgorithmParams, TrajectoryLog)> {
    config.validate()?;
    config.cfg.validate(dataset)?;
    match (config.objective, pool) {
        (Objective::Fixml, None) => return Err(Error::invalid("fixml training requires a support pool")),
        (Objective::Ml, Some(_)) => return Err(Error::invalid("ml training takes no support pool")),
        _ => {}
    }
    if init.spec() != &config.embedding {
        return Err(Error::invalid("initial parameters do not match the configured embedding"));
    }
    if init.spec().input_dim != dataset.dim() {
        return Err(Error::Dimension { what: "embedding input dim", expected: dataset.dim(), got: init.spec().input_dim });
    }
    let start = std::time::Instant::now();
    let snap = Snapshotter { dataset, pool, tracked, config };
    let mut w = init;
    let mut log = TrajectoryLog::default();
    let first = snap.record(&w, 0, None, 0, start)?;
    let limit = DIVERGENCE_FACTOR * first.train_loss;
    observe(TrainEvent::Record(&first));
    log.records.push(first);
    log.checkpoints.push(w.clone());

    let mut velocity = vec![0.0; w.len()];
    let steps = config.steps_per_epoch();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut batch_losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let episodes = (0..config.task_batch)
                .map(|b| {
                    let s = train_episode_seed(config.seed, epoch, step, b);
                    match pool {
                        Some(p) => taskspace::sample_episode_from_pool(dataset, p, &config.cfg, s),
                        None => taskspace::sample_episode_ml(dataset, &config.cfg, s),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            for ep in &episodes {
                observe(TrainEvent::Episode { epoch, step, episode: ep });
            }
            let (loss, grad) = batch_loss_and_grad(&w, &episodes, config.solver)?;
            if !loss.is_finite() || loss > limit {
                return Err(Error::Divergence { epoch, loss, limit });
            }
            batch_losses.push(loss);
            momentum_step(&mut w, &mut velocity, &grad, lr, config.momentum);
        }
        let done = epoch + 1;
        if done % config.eval_every == 0 || done == config.epochs {
            let rec = snap.record(&w, done, Some(exec::mean(&batch_losses)), log.checkpoints.len(), start)?;
            if !rec.train_loss.is_finite() || rec.train_loss > limit {
                return Err(Error::Divergence { epoch: done, loss: rec.train_loss, limit });
            }
            observe(TrainEvent::Record(&rec));
            log.records.push(rec);
            log.checkpoints.push(w.clone());
        }
    }
    Ok((w, log))
}

/// Mean loss and mean gradient over a batch, reduced in fixed order.
pub fn batch_loss_and_grad(w: &AlgorithmParams, episodes: &[Episode], head: HeadKind) -> Result<(f64, Vec<f64>)> {
    if episodes.is_empty() {
        return Err(Error::invalid("empty task batch"));
    }
    let parts = exec::map_indexed(episodes.len(), |i| objectives::episode_loss_and_grad(w, &episodes[i], head))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = episodes.len() as f64;
    let losses: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.2).collect();
    let mut g = exec::pairwise_sum_vecs(&grads);
    g.iter_mut().for_each(|v| *v /= n);
    Ok((exec::pairwise_sum(&losses) / n, g))
}

fn momentum_step(w: &mut AlgorithmParams, velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in w.values_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Full-batch momentum descent on the mean loss over a fixed task list,
/// `steps` iterations at learning rate `lr`. Tasks with identical content
/// count once, so the objective is a function of the task set.
pub fn train_on_tasks(
    tasks: &[Episode],
    head: HeadKind,
    init: AlgorithmParams,
    steps: usize,
    lr: f64,
    momentum: f64,
) -> Result<AlgorithmParams> {
    let unique = dedup_tasks(tasks);
    let mut w = init;
    if steps == 0 || unique.is_empty() {
        return Ok(w);
    }
    let mut velocity = vec![0.0; w.len()];
    let mut limit = None;
    for step in 0..steps {
        let (loss, grad) = batch_loss_and_grad(&w, &unique, head)?;
        let lim = *limit.get_or_insert(DIVERGENCE_FACTOR * loss);
        if !loss.is_finite() || loss > lim {
            return Err(Error::Divergence { epoch: step, loss, limit: lim });
        }
        momentum_step(&mut w, &mut velocity, &grad, lr, momentum);
    }
    Ok(w)
}

fn task_fingerprint(ep: &Episode) -> Vec<u64> {
    let mut v = Vec::new();
    for item in ep.support.iter().chain(&ep.query) {
        v.push(item.label as u64);
        v.extend(item.features.iter().map(|f| f.to_bits()));
    }
    v.push(ep.support.len() as u64);
    v
}

fn dedup_tasks(tasks: &[Episode]) -> Vec<Episode> {
    let mut seen = std::collections::BTreeSet::new();
    tasks.iter().filter(|t| seen.insert(task_fingerprint(t))).cloned().collect()
}

const CKPT_MAGIC: &[u8; 4] = b"FXML";
pub const CKPT_VERSION: u32 = 1;
pub const CKPT_HEADER_BYTES: usize = 16;

/// Writes `FXML`, version (u32 LE), `d` (u64 LE), then `d` f64 LE.
pub fn save_checkpoint(params: &AlgorithmParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(CKPT_HEADER_BYTES + 8 * params.len());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads the raw parameter vector of a checkpoint.
pub fn load_checkpoint_values(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |msg: String| Error::Format { path: path.to_path_buf(), msg };
    if bytes.len() < CKPT_HEADER_BYTES {
        return Err(fmt(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CKPT_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let d = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[CKPT_HEADER_BYTES..];
    if body.len() as u64 != d.saturating_mul(8) {
        return Err(fmt(format!("header declares {d} values but body holds {} bytes", body.len())));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Loads a checkpoint and checks it against the expected embedding layout.
pub fn load_checkpoint(path: &Path, spec: &EmbeddingSpec) -> Result<AlgorithmParams> {
    let values = load_checkpoint_values(path)?;
    if values.len() != spec.param_count() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("holds {} values, embedding expects {}", values.len(), spec.param_count()),
        });
    }
    AlgorithmParams::new(spec.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_lookup() {
        let mut c = TrainConfig::new(Objective::Ml, TaskConfig::new(2, 1, 1), HeadKind::ProtoNet, EmbeddingSpec::linear(2, 2));
        c.epochs = 10;
        c.lr_schedule = default_schedule(0.5, 10);
        assert_eq!(c.lr_schedule, vec![(0, 0.5), (6, 0.05)]);
        assert_eq!(c.lr_at(5), 0.5);
        assert_eq!(c.lr_at(6), 0.05);
        assert!(c.validate().is_ok());
        c.lr_schedule = vec![(1, 0.1)];
        assert!(c.validate().is_err());
        c.lr_schedule = vec![(0, 0.1), (0, 0.2)];
        assert!(c.validate().is_err());
        assert_eq!(default_schedule(0.1, 0), vec![(0, 0.1)]);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = EmbeddingSpec::mlp(3, vec![4], 2);
        let a = init_params(&spec, 9).unwrap();
        let b = init_params(&spec, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 10).unwrap());
        assert!(a.values()[12..16].iter().all(|v| *v == 0.0));
        assert!(a.values()[24..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_parse() {
        assert_eq!("fixml".parse::<Objective>().unwrap(), Objective::Fixml);
        assert!("sgd".parse::<Objective>().is_err());
    }
}
