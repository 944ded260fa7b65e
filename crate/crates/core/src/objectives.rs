//! Episode losses and gradients, and Monte Carlo estimators of the episodic
//! (`ML`) and fixed-pool (`FIX-ML`) objectives.

use nalgebra::DMatrix;

use crate::exec;
use crate::seeds::{self, stream};
use crate::solvers::{self, HeadKind};
use crate::taskspace::{self, Dataset, Episode, SupportPool, TaskConfig};
use crate::{Error, Result};

pub use crate::solvers::AlgorithmParams;

/// Per-episode loss, accuracy and (optionally) parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub grad: Option<Vec<f64>>,
}

fn stack_rows(items: &[taskspace::EpisodeItem], dim: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(items.len(), dim, items.iter().flat_map(|i| i.features.iter().copied()))
}

/// Head logits for an episode (query rows x n_way).
pub fn episode_logits(w: &AlgorithmParams, episode: &Episode, head: HeadKind) -> Result<DMatrix<f64>> {
    let (zs, zq, _) = embed_episode(w, episode)?;
    solvers::head_logits(head, &zs, &episode.support_labels(), episode.n_way(), &zq)
}

fn embed_episode(w: &AlgorithmParams, episode: &Episode) -> Result<(DMatrix<f64>, DMatrix<f64>, solvers::EmbedCache)> {
    let dim = episode.dim();
    if dim != w.spec().input_dim {
        return Err(Error::Dimension { what: "episode feature dim", expected: w.spec().input_dim, got: dim });
    }
    let ns = episode.support.len();
    let nq = episode.query.len();
    let mut x = stack_rows(&episode.support, dim);
    x = x.insert_rows(ns, nq, 0.0);
    x.rows_mut(ns, nq).copy_from(&stack_rows(&episode.query, dim));
    let (z, cache) = solvers::embed_batch(w, &x)?;
    let zs = z.rows(0, ns).into_owned();
    let zq = z.rows(ns, nq).into_owned();
    Ok((zs, zq, cache))
}

/// Loss/accuracy (and gradient when `with_grad`) using the given query labels
/// instead of the episode's own. Support labels always come from the episode.
pub fn episode_outcome_with_labels(
    w: &AlgorithmParams,
    episode: &Episode,
    head: HeadKind,
    query_labels: &[usize],
    with_grad: bool,
) -> Result<EpisodeOutcome> {
    head.validate()?;
    if query_labels.len() != episode.query.len() {
        return Err(Error::Dimension { what: "query labels", expected: episode.query.len(), got: query_labels.len() });
    }
    let (zs, zq, cache) = embed_episode(w, episode)?;
    let labels = episode.support_labels();
    let n_way = episode.n_way();
    let logits = solvers::head_logits(head, &zs, &labels, n_way, &zq)?;
    let (loss, d_logits, accuracy) = solvers::softmax_cross_entropy(&logits, query_labels);
    let grad = if with_grad {
        let (d_s, d_q) = solvers::head_backward(head, &zs, &labels, n_way, &zq, &d_logits)?;
        let mut d_z = d_s.insert_rows(zs.nrows(), zq.nrows(), 0.0);
        d_z.rows_mut(zs.nrows(), zq.nrows()).copy_from(&d_q);
        Some(solvers::embed_backward(w, &cache, &d_z))
    } else {
        None
    };
    Ok(EpisodeOutcome { loss, accuracy, grad })
}

/// Mean per-query cross-entropy and accuracy of one episode.
pub fn episode_loss(w: &AlgorithmParams, episode: &Episode, head: HeadKind) -> Result<(f64, f64)> {
    let o = episode_outcome_with_labels(w, episode, head, &episode.query_labels(), false)?;
    Ok((o.loss, o.accuracy))
}

/// Exact gradient of [`episode_loss`]'s loss with respect to the parameters.
pub fn episode_grad(w: &AlgorithmParams, episode: &Episode, head: HeadKind) -> Result<Vec<f64>> {
    Ok(episode_loss_and_grad(w, episode, head)?.2)
}

pub fn episode_loss_and_grad(w: &AlgorithmParams, episode: &Episode, head: HeadKind) -> Result<(f64, f64, Vec<f64>)> {
    let o = episode_outcome_with_labels(w, episode, head, &episode.query_labels(), true)?;
    Ok((o.loss, o.accuracy, o.grad.expect("requested")))
}

/// Mean with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub half_width_95: f64,
    pub n_episodes: usize,
    pub accuracy_mean: f64,
    pub accuracy_half_width_95: f64,
}

impl LossEstimate {
    pub fn from_samples(losses: &[f64], accuracies: &[f64]) -> Result<Self> {
        if losses.len() < 2 || losses.len() != accuracies.len() {
            return Err(Error::invalid("an estimate needs at least two matched samples"));
        }
        let n = losses.len();
        let hw = |xs: &[f64]| 1.96 * exec::sample_std(xs) / (n as f64).sqrt();
        Ok(LossEstimate {
            mean: exec::mean(losses),
            half_width_95: hw(losses),
            n_episodes: n,
            accuracy_mean: exec::mean(accuracies),
            accuracy_half_width_95: hw(accuracies),
        })
    }
}

/// Seed of the `i`-th evaluation episode under root `seed`.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    seeds::derive(seed, &[stream::EVAL, i as u64])
}

fn estimate_with<F>(n_episodes: usize, sample: F, w: &AlgorithmParams, head: HeadKind) -> Result<LossEstimate>
where
    F: Fn(usize) -> Result<Episode> + Sync + Send,
{
    if n_episodes < 2 {
        return Err(Error::invalid("n_episodes must be >= 2"));
    }
    let out = exec::map_indexed(n_episodes, |i| sample(i).and_then(|ep| episode_loss(w, &ep, head)));
    let pairs = out.into_iter().collect::<Result<Vec<_>>>()?;
    let (losses, accs): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    LossEstimate::from_samples(&losses, &accs)
}

/// Unbiased Monte Carlo estimate of the episodic objective.
pub fn ml_loss_estimate(
    w: &AlgorithmParams,
    dataset: &Dataset,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<LossEstimate> {
    cfg.validate(dataset)?;
    estimate_with(n_episodes, |i| taskspace::sample_episode_ml(dataset, cfg, eval_episode_seed(seed, i)), w, head)
}

/// Monte Carlo estimate of the fixed-pool objective for `pool`.
pub fn fixml_loss_estimate(
    w: &AlgorithmParams,
    dataset: &Dataset,
    pool: &SupportPool,
    cfg: &TaskConfig,
    head: HeadKind,
    n_episodes: usize,
    seed: u64,
) -> Result<LossEstimate> {
    cfg.validate(dataset)?;
    estimate_with(n_episodes, |i| taskspace::sample_episode_from_pool(dataset, pool, cfg, eval_episode_seed(seed, i)), w, head)
}

/// Exact expectation of loss and gradient over a weighted episode list (from
/// the `taskspace::enumerate_*` functions).
pub fn expected_loss_and_grad(w: &AlgorithmParams, weighted: &[(Episode, f64)], head: HeadKind) -> Result<(f64, Vec<f64>)> {
    let parts = exec::map_indexed(weighted.len(), |i| {
        let (ep, p) = &weighted[i];
        episode_loss_and_grad(w, ep, head).map(|(l, _, g)| (l * p, g.into_iter().map(|v| v * p).collect::<Vec<_>>()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = parts.iter().map(|(l, _)| *l).collect();
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|(_, g)| g).collect();
    Ok((exec::pairwise_sum(&losses), exec::pairwise_sum_vecs(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::EmbeddingSpec;
    use crate::taskspace::{Episode, SplitTag};

    fn separated() -> Dataset {
        // three examples per class; clusters 1e3 apart
        let ex = (0..3).map(|c| (0..3).map(|i| vec![1e3 * c as f64 + 0.1 * i as f64, 0.0]).collect()).collect();
        Dataset::new(ex, SplitTag::Train).unwrap()
    }

    #[test]
    fn duplicated_query_is_perfect() {
        let d = separated();
        let ep = Episode::assemble(&d, &[0, 1, 2], &[vec![0], vec![0], vec![0]], &[vec![0], vec![0], vec![0]]);
        let w = AlgorithmParams::zeros(EmbeddingSpec::identity(2)).unwrap();
        let (loss, acc) = episode_loss(&w, &ep, HeadKind::ProtoNet).unwrap();
        assert_eq!(acc, 1.0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn equidistant_query_gives_ln2() {
        let ex = vec![vec![vec![-1.0], vec![0.0]], vec![vec![1.0], vec![0.0]]];
        let d = Dataset::new(ex, SplitTag::Train).unwrap();
        let ep = Episode::assemble(&d, &[0, 1], &[vec![0], vec![0]], &[vec![1], vec![1]]);
        let w = AlgorithmParams::zeros(EmbeddingSpec::identity(1)).unwrap();
        let (loss, acc) = episode_loss(&w, &ep, HeadKind::ProtoNet).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // both queries predicted as class 0: one right, one wrong
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let d = separated();
        let ep = Episode::assemble(&d, &[0, 1], &[vec![0], vec![0]], &[vec![1], vec![1]]);
        let w = AlgorithmParams::zeros(EmbeddingSpec::identity(3)).unwrap();
        assert!(matches!(episode_loss(&w, &ep, HeadKind::ProtoNet), Err(Error::Dimension { .. })));
    }

    #[test]
    fn identical_samples_have_zero_width() {
        let e = LossEstimate::from_samples(&[0.7, 0.7], &[0.5, 0.5]).unwrap();
        assert_eq!(e.half_width_95, 0.0);
        assert_eq!(e.mean, 0.7);
        assert!(LossEstimate::from_samples(&[0.7], &[0.5]).is_err());
    }

    #[test]
    fn class_order_permutation_invariance() {
        let d = separated();
        let w = AlgorithmParams::new(EmbeddingSpec::linear(2, 2), vec![0.01, 0.02, -0.03, 0.01, 0.1, 0.0]).unwrap();
        let a = Episode::assemble(&d, &[0, 1, 2], &[vec![0], vec![1], vec![2]], &[vec![1], vec![2], vec![0]]);
        let b = Episode::assemble(&d, &[2, 0, 1], &[vec![2], vec![0], vec![1]], &[vec![0], vec![1], vec![2]]);
        for head in [HeadKind::ProtoNet, HeadKind::Ridge { lambda: 0.5 }] {
            let (la, _) = episode_loss(&w, &a, head).unwrap();
            let (lb, _) = episode_loss(&w, &b, head).unwrap();
            assert!((la - lb).abs() < 1e-12, "{head:?}: {la} vs {lb}");
        }
    }
}
