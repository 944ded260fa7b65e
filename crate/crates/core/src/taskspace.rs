//! Datasets, support pools and episode samplers.
//!
//! Two samplers produce episodes `(C, S, Q)`:
//!
//! * [`sample_episode_ml`] draws the class set, then support and query
//!   examples for every class, all without replacement;
//! * [`sample_episode_from_pool`] draws the class set and takes the support
//!   straight out of a [`SupportPool`] (no sampling freedom), then draws the
//!   query from the remaining examples of those classes.
//!
//! Composing [`sample_support_pool`] with the second sampler reproduces the
//! first sampler's distribution over `(S, Q)`. The `enumerate_*` functions give
//! the exact distributions on small instances.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::linalg;
use crate::seeds::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::invalid(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Labeled feature vectors grouped into `n_classes` classes of `per_class`
/// examples each. Features are stored flat, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_classes: usize,
    per_class: usize,
    dim: usize,
    features: Vec<f64>,
    split: SplitTag,
    /// Identity of each local class in the dataset it was split from.
    origin: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from `examples[class][i]`, checking every invariant.
    pub fn new(examples: Vec<Vec<Vec<f64>>>, split: SplitTag) -> Result<Self> {
        let n_classes = examples.len();
        if n_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        let per_class = examples[0].len();
        if per_class == 0 {
            return Err(Error::invalid("dataset needs at least one example per class"));
        }
        let dim = examples[0][0].len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let mut features = Vec::with_capacity(n_classes * per_class * dim);
        for (c, class) in examples.iter().enumerate() {
            if class.len() != per_class {
                return Err(Error::invalid(format!("class {c} has {} examples, expected {per_class}", class.len())));
            }
            for x in class {
                if x.len() != dim {
                    return Err(Error::Dimension { what: "feature vector", expected: dim, got: x.len() });
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("class {c} has a non-finite feature")));
                }
                features.extend_from_slice(x);
            }
        }
        Ok(Dataset { n_classes, per_class, dim, features, split, origin: (0..n_classes).collect() })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Global class identities (for overlap checks between splits).
    pub fn origin_classes(&self) -> &[usize] {
        &self.origin
    }

    pub fn example(&self, class: usize, index: usize) -> &[f64] {
        let start = (class * self.per_class + index) * self.dim;
        &self.features[start..start + self.dim]
    }

    /// Splits off the first `n_first` classes (tagged `first`) from the rest
    /// (tagged `second`).
    pub fn split_classes(&self, n_first: usize, first: SplitTag, second: SplitTag) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.n_classes {
            return Err(Error::invalid(format!("cannot split {} classes at {n_first}", self.n_classes)));
        }
        let block = self.per_class * self.dim;
        let a = Dataset {
            n_classes: n_first,
            per_class: self.per_class,
            dim: self.dim,
            features: self.features[..n_first * block].to_vec(),
            split: first,
            origin: self.origin[..n_first].to_vec(),
        };
        let b = Dataset {
            n_classes: self.n_classes - n_first,
            per_class: self.per_class,
            dim: self.dim,
            features: self.features[n_first * block..].to_vec(),
            split: second,
            origin: self.origin[n_first..].to_vec(),
        };
        Ok((a, b))
    }

    /// Parses the CSV ingestion format: a header line
    /// `n_classes,per_class,dim` followed by `class_id,f_0,...,f_{dim-1}` rows.
    pub fn from_csv_str(text: &str, split: SplitTag) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::invalid("empty dataset file"))?;
        let head: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad header {header:?}: {e}")))?;
        let [n_classes, per_class, dim] = head[..] else {
            return Err(Error::invalid(format!("header must have 3 fields, got {header:?}")));
        };
        let mut examples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_classes];
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(',').map(str::trim);
            let class: usize =
                fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| Error::invalid(format!("row {}: bad class id", lineno + 2)))?;
            if class >= n_classes {
                return Err(Error::invalid(format!("row {}: class id {class} out of range 0..{n_classes}", lineno + 2)));
            }
            let x: Vec<f64> = fields
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("row {}: {e}", lineno + 2)))?;
            if x.len() != dim {
                return Err(Error::Dimension { what: "csv feature row", expected: dim, got: x.len() });
            }
            examples[class].push(x);
        }
        for (c, ex) in examples.iter().enumerate() {
            if ex.len() != per_class {
                return Err(Error::invalid(format!("class {c} has {} rows, header says {per_class}", ex.len())));
            }
        }
        Dataset::new(examples, split)
    }

    pub fn load_csv(path: &Path, split: SplitTag) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_csv_str(&text, split)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = format!("{},{},{}\n", self.n_classes, self.per_class, self.dim);
        for c in 0..self.n_classes {
            for i in 0..self.per_class {
                out.push_str(&c.to_string());
                for v in self.example(c, i) {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Parameters of the synthetic Gaussian class-cluster family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub class_spread: f64,
    pub within_noise: f64,
}

/// Class means are drawn `N(0, spread^2 I)`; examples are drawn i.i.d. around
/// their class mean with isotropic scale `within_noise`.
pub fn generate_gaussian_dataset(spec: GaussianSpec, seed: u64) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.per_class == 0 || spec.dim == 0 {
        return Err(Error::invalid("dataset counts must be positive"));
    }
    if !(spec.class_spread > 0.0) || !(spec.within_noise >= 0.0) {
        return Err(Error::invalid("class_spread must be > 0 and within_noise >= 0"));
    }
    let mut rng = seeds::rng_for(seed, &[seeds::stream::DATA]);
    // means first, so datasets that differ only in per_class share them
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.class_spread * z
                })
                .collect()
        })
        .collect();
    let examples = means
        .iter()
        .map(|mean| {
            (0..spec.per_class)
                .map(|_| {
                    mean.iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + spec.within_noise * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Dataset::new(examples, SplitTag::Train)
}

/// A structured subset of a dataset: exactly `shots` example indices per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SupportPool {
    shots: usize,
    indices: Vec<Vec<usize>>,
}

impl SupportPool {
    /// Validates and canonicalises (sorts) the per-class index lists.
    pub fn new(shots: usize, mut indices: Vec<Vec<usize>>, dataset: &Dataset) -> Result<Self> {
        if shots == 0 {
            return Err(Error::invalid("pool shots must be positive"));
        }
        if indices.len() != dataset.n_classes() {
            return Err(Error::Dimension { what: "pool classes", expected: dataset.n_classes(), got: indices.len() });
        }
        for (c, idx) in indices.iter_mut().enumerate() {
            if idx.len() != shots {
                return Err(Error::invalid(format!("pool class {c} has {} indices, expected {shots}", idx.len())));
            }
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("pool class {c} repeats an index")));
            }
            if idx.last().is_some_and(|&i| i >= dataset.per_class()) {
                return Err(Error::invalid(format!("pool class {c} index out of range")));
            }
        }
        Ok(SupportPool { shots, indices })
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.indices[class]
    }

    pub fn n_classes(&self) -> usize {
        self.indices.len()
    }
}

/// Draws an independent uniform `k`-subset of example indices for every class.
pub fn sample_support_pool(dataset: &Dataset, k: usize, seed: u64) -> Result<SupportPool> {
    if k > dataset.per_class() {
        return Err(Error::ShotCount { k, per_class: dataset.per_class() });
    }
    let mut rng = seeds::rng_for(seed, &[seeds::stream::POOL]);
    let indices = (0..dataset.n_classes()).map(|_| index::sample(&mut rng, dataset.per_class(), k).into_vec()).collect();
    SupportPool::new(k, indices, dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl TaskConfig {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Self {
        TaskConfig { n_way, k_shot, q_query }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return Err(Error::invalid("n_way, k_shot and q_query must be positive"));
        }
        if self.n_way > dataset.n_classes() {
            return Err(Error::Budget(format!("n_way {} exceeds {} classes", self.n_way, dataset.n_classes())));
        }
        if self.k_shot + self.q_query > dataset.per_class() {
            return Err(Error::Budget(format!(
                "k_shot + q_query = {} exceeds per_class {}",
                self.k_shot + self.q_query,
                dataset.per_class()
            )));
        }
        Ok(())
    }
}

/// Where an episode entry came from in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub class: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub features: Vec<f64>,
    /// Local label in `0..n_way`.
    pub label: usize,
    pub source: ExampleRef,
}

/// A task `(C, S, Q)`. Support and query entries are grouped by local label,
/// with example indices ascending inside each group.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

/// Canonical identity of an episode: class set plus the support and query
/// example references.
pub type EpisodeKey = (Vec<usize>, Vec<ExampleRef>, Vec<ExampleRef>);

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |s| s.features.len())
    }

    pub fn key(&self) -> EpisodeKey {
        (self.classes.clone(), self.support.iter().map(|s| s.source).collect(), self.query.iter().map(|s| s.source).collect())
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }

    /// Rebuilds an episode from explicit per-class support/query index lists.
    pub fn assemble(dataset: &Dataset, classes: &[usize], support: &[Vec<usize>], query: &[Vec<usize>]) -> Episode {
        let items = |lists: &[Vec<usize>]| -> Vec<EpisodeItem> {
            classes
                .iter()
                .zip(lists)
                .enumerate()
                .flat_map(|(label, (&class, idx))| {
                    idx.iter().map(move |&index| EpisodeItem {
                        features: dataset.example(class, index).to_vec(),
                        label,
                        source: ExampleRef { class, index },
                    })
                })
                .collect()
        };
        Episode { classes: classes.to_vec(), support: items(support), query: items(query) }
    }
}

fn sample_classes(rng: &mut Rng, n_classes: usize, n_way: usize) -> Vec<usize> {
    let mut c = index::sample(rng, n_classes, n_way).into_vec();
    c.sort_unstable();
    c
}

/// Standard episodic sampler: uniform class subset, then for every class a
/// uniform support `k`-subset and a uniform query `q`-subset of the rest.
pub fn sample_episode_ml(dataset: &Dataset, cfg: &TaskConfig, seed: u64) -> Result<Episode> {
    cfg.validate(dataset)?;
    let mut rng = seeds::rng(seed);
    let classes = sample_classes(&mut rng, dataset.n_classes(), cfg.n_way);
    let mut support = Vec::with_capacity(cfg.n_way);
    let mut query = Vec::with_capacity(cfg.n_way);
    for _ in &classes {
        let drawn = index::sample(&mut rng, dataset.per_class(), cfg.k_shot + cfg.q_query).into_vec();
        let mut s = drawn[..cfg.k_shot].to_vec();
        let mut q = drawn[cfg.k_shot..].to_vec();
        s.sort_unstable();
        q.sort_unstable();
        support.push(s);
        query.push(q);
    }
    Ok(Episode::assemble(dataset, &classes, &support, &query))
}

/// Fixed-pool sampler: uniform class subset, support is exactly the pool's
/// examples of those classes, query drawn from the non-pool examples.
pub fn sample_episode_from_pool(dataset: &Dataset, pool: &SupportPool, cfg: &TaskConfig, seed: u64) -> Result<Episode> {
    cfg.validate(dataset)?;
    check_pool(dataset, pool, cfg)?;
    let mut rng = seeds::rng(seed);
    let classes = sample_classes(&mut rng, dataset.n_classes(), cfg.n_way);
    let support: Vec<Vec<usize>> = classes.iter().map(|&c| pool.class_indices(c).to_vec()).collect();
    let query = classes
        .iter()
        .map(|&c| {
            let rest = complement(dataset.per_class(), pool.class_indices(c));
            let mut q: Vec<usize> = index::sample(&mut rng, rest.len(), cfg.q_query).into_iter().map(|j| rest[j]).collect();
            q.sort_unstable();
            q
        })
        .collect::<Vec<_>>();
    Ok(Episode::assemble(dataset, &classes, &support, &query))
}

fn check_pool(dataset: &Dataset, pool: &SupportPool, cfg: &TaskConfig) -> Result<()> {
    if pool.shots() != cfg.k_shot {
        return Err(Error::invalid(format!("pool has {} shots but task asks for {}", pool.shots(), cfg.k_shot)));
    }
    if pool.n_classes() != dataset.n_classes() {
        return Err(Error::Dimension { what: "pool classes", expected: dataset.n_classes(), got: pool.n_classes() });
    }
    Ok(())
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| sorted.binary_search(i).is_err()).collect()
}

/// All pools of a dataset (only sensible for tiny instances).
pub fn enumerate_pools(dataset: &Dataset, k: usize) -> Result<Vec<SupportPool>> {
    if k > dataset.per_class() {
        return Err(Error::ShotCount { k, per_class: dataset.per_class() });
    }
    let per_class: Vec<Vec<usize>> = (0..dataset.per_class()).combinations(k).collect();
    (0..dataset.n_classes())
        .map(|_| per_class.iter().cloned())
        .multi_cartesian_product()
        .map(|indices| SupportPool::new(k, indices, dataset))
        .collect()
}

/// Exact distribution of [`sample_episode_ml`]: every reachable episode with
/// its probability.
pub fn enumerate_ml_episodes(dataset: &Dataset, cfg: &TaskConfig) -> Result<Vec<(Episode, f64)>> {
    cfg.validate(dataset)?;
    let mut out = Vec::new();
    let class_sets: Vec<Vec<usize>> = (0..dataset.n_classes()).combinations(cfg.n_way).collect();
    // (support, query) choices for a single class
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..dataset.per_class())
        .combinations(cfg.k_shot)
        .flat_map(|s| {
            let rest = complement(dataset.per_class(), &s);
            rest.into_iter().combinations(cfg.q_query).map(move |q| (s.clone(), q))
        })
        .collect();
    let per_episode = 1.0 / (class_sets.len() as f64 * (splits.len() as f64).powi(cfg.n_way as i32));
    for classes in &class_sets {
        for choice in (0..cfg.n_way).map(|_| splits.iter()).multi_cartesian_product() {
            let support: Vec<Vec<usize>> = choice.iter().map(|(s, _)| s.clone()).collect();
            let query: Vec<Vec<usize>> = choice.iter().map(|(_, q)| q.clone()).collect();
            out.push((Episode::assemble(dataset, classes, &support, &query), per_episode));
        }
    }
    Ok(out)
}

/// Exact distribution of [`sample_episode_from_pool`] for a fixed pool.
pub fn enumerate_pool_episodes(dataset: &Dataset, pool: &SupportPool, cfg: &TaskConfig) -> Result<Vec<(Episode, f64)>> {
    cfg.validate(dataset)?;
    check_pool(dataset, pool, cfg)?;
    let class_sets: Vec<Vec<usize>> = (0..dataset.n_classes()).combinations(cfg.n_way).collect();
    let mut out = Vec::new();
    for classes in &class_sets {
        let support: Vec<Vec<usize>> = classes.iter().map(|&c| pool.class_indices(c).to_vec()).collect();
        let query_choices: Vec<Vec<Vec<usize>>> = classes
            .iter()
            .map(|&c| complement(dataset.per_class(), pool.class_indices(c)).into_iter().combinations(cfg.q_query).collect())
            .collect();
        let n_q: usize = query_choices.iter().map(Vec::len).product();
        let p = 1.0 / (class_sets.len() as f64 * n_q as f64);
        for query in query_choices.iter().map(|v| v.iter().cloned()).multi_cartesian_product() {
            out.push((Episode::assemble(dataset, classes, &support, &query), p));
        }
    }
    Ok(out)
}

/// Collapses a weighted episode list into a distribution keyed by
/// [`Episode::key`].
pub fn episode_distribution(weighted: &[(Episode, f64)]) -> BTreeMap<EpisodeKey, f64> {
    let mut dist = BTreeMap::new();
    for (ep, w) in weighted {
        *dist.entry(ep.key()).or_insert(0.0) += w;
    }
    dist
}

/// Total variation distance between two distributions over the same key type.
pub fn total_variation<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut diff = 0.0;
    for (k, pa) in a {
        diff += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in b {
        if !a.contains_key(k) {
            diff += pb.abs();
        }
    }
    0.5 * diff
}

fn log10_binomial(n: usize, k: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    if k == 0 || k == n {
        return 0.0;
    }
    let (n, k) = (n as f64, k as f64);
    (ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)) / std::f64::consts::LN_10
}

/// `log10 |P|` for pools with exactly `k` examples from each of `n_classes`
/// classes of `per_class` examples.
pub fn count_support_pools_log10(n_classes: usize, per_class: usize, k: usize) -> Result<f64> {
    if k > per_class {
        return Err(Error::ShotCount { k, per_class });
    }
    Ok(n_classes as f64 * log10_binomial(per_class, k))
}

/// `log10` of the number of distinct `n_way`-class supports a single fixed pool
/// removes relative to the full pool family.
pub fn count_reduction_factor_log10(per_class: usize, k: usize, n_way: usize) -> Result<f64> {
    count_support_pools_log10(n_way, per_class, k)
}

// ---------------------------------------------------------------------------
// Meta-linear-regression task family

/// Law of the task parameter: independent normal coordinates (scale 0 gives a
/// point mass).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLaw {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumLaw {
    Fixed(Vec<f64>),
    /// Independent uniform eigenvalues on `[low, high]`, `low > 0`.
    Uniform {
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLaw {
    Fixed(f64),
    Uniform { low: f64, high: f64 },
}

/// Smallest eigenvalue used when the spectrum is coupled to `|theta|`.
pub const COUPLED_SPECTRUM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMetaDistribution {
    pub dim: usize,
    pub theta: ThetaLaw,
    pub spectrum: SpectrumLaw,
    pub basis: Arc<DMatrix<f64>>,
    pub noise: NoiseLaw,
    pub couple_spectrum_to_theta: bool,
}

impl RegressionMetaDistribution {
    /// Identity basis, fixed spectrum, no noise.
    pub fn simple(theta_mean: Vec<f64>, theta_scale: Vec<f64>, spectrum: Vec<f64>) -> Self {
        let dim = theta_mean.len();
        RegressionMetaDistribution {
            dim,
            theta: ThetaLaw { mean: theta_mean, scale: theta_scale },
            spectrum: SpectrumLaw::Fixed(spectrum),
            basis: Arc::new(DMatrix::identity(dim, dim)),
            noise: NoiseLaw::Fixed(0.0),
            couple_spectrum_to_theta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim;
        if p == 0 {
            return Err(Error::invalid("regression dim must be positive"));
        }
        if self.theta.mean.len() != p || self.theta.scale.len() != p {
            return Err(Error::Dimension { what: "theta law", expected: p, got: self.theta.mean.len().min(self.theta.scale.len()) });
        }
        if self.theta.scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("theta scales must be >= 0"));
        }
        match &self.spectrum {
            SpectrumLaw::Fixed(s) => {
                if s.len() != p {
                    return Err(Error::Dimension { what: "spectrum", expected: p, got: s.len() });
                }
                if s.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::invalid("spectrum entries must be > 0"));
                }
            }
            SpectrumLaw::Uniform { low, high } => {
                if !(*low > 0.0 && high >= low) {
                    return Err(Error::invalid("spectrum law needs 0 < low <= high"));
                }
            }
        }
        match self.noise {
            NoiseLaw::Fixed(s) if !(s >= 0.0) => return Err(Error::invalid("noise must be >= 0")),
            NoiseLaw::Uniform { low, high } if !(low >= 0.0 && high >= low) => {
                return Err(Error::invalid("noise law needs 0 <= low <= high"))
            }
            _ => {}
        }
        if self.basis.nrows() != p || self.basis.ncols() != p {
            return Err(Error::Dimension { what: "basis", expected: p, got: self.basis.nrows() });
        }
        if linalg::orthonormality_error(&self.basis) > 1e-10 {
            return Err(Error::invalid("basis is not orthonormal to 1e-10"));
        }
        Ok(())
    }
}

/// One regression task: `x ~ N(0, V diag(spectrum) V^T)`, `y = x^T theta + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTask {
    pub theta: DVector<f64>,
    pub spectrum: DVector<f64>,
    pub sigma: f64,
    pub basis: Arc<DMatrix<f64>>,
}

impl RegressionTask {
    /// Task with identity basis, i.e. diagonal covariance.
    pub fn diagonal(theta: &[f64], spectrum: &[f64], sigma: f64) -> Self {
        let p = theta.len();
        RegressionTask {
            theta: DVector::from_column_slice(theta),
            spectrum: DVector::from_column_slice(spectrum),
            sigma,
            basis: Arc::new(DMatrix::identity(p, p)),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let v = &*self.basis;
        v * DMatrix::from_diagonal(&self.spectrum) * v.transpose()
    }
}

pub fn sample_regression_task(meta: &RegressionMetaDistribution, seed: u64) -> Result<RegressionTask> {
    meta.validate()?;
    let mut rng = seeds::rng_for(seed, &[seeds::stream::TASK]);
    let theta = DVector::from_iterator(
        meta.dim,
        meta.theta.mean.iter().zip(&meta.theta.scale).map(|(&m, &s)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + s * z
        }),
    );
    let spectrum = if meta.couple_spectrum_to_theta {
        theta.map(|t| t.abs().max(COUPLED_SPECTRUM_FLOOR))
    } else {
        match &meta.spectrum {
            SpectrumLaw::Fixed(s) => DVector::from_column_slice(s),
            SpectrumLaw::Uniform { low, high } => {
                DVector::from_fn(meta.dim, |_, _| if high > low { rng.random_range(*low..=*high) } else { *low })
            }
        }
    };
    let sigma = match meta.noise {
        NoiseLaw::Fixed(s) => s,
        NoiseLaw::Uniform { low, high } => {
            if high > low {
                rng.random_range(low..=high)
            } else {
                low
            }
        }
    };
    Ok(RegressionTask { theta, spectrum, sigma, basis: meta.basis.clone() })
}

/// Draws `n` rows `x ~ N(0, Sigma)` and responses `y = X theta + eps`.
pub fn sample_regression_data(task: &RegressionTask, n: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if n == 0 {
        return Err(Error::invalid("need at least one regression sample"));
    }
    let mut rng = seeds::rng_for(seed, &[seeds::stream::DATA]);
    Ok(sample_regression_data_with(task, n, &mut rng))
}

pub(crate) fn sample_regression_data_with(task: &RegressionTask, n: usize, rng: &mut Rng) -> (DMatrix<f64>, DVector<f64>) {
    let p = task.dim();
    let scale = task.spectrum.map(f64::sqrt);
    let z = DMatrix::from_fn(n, p, |_, j| {
        scale[j] * {
            let z: f64 = StandardNormal.sample(rng);
            z
        }
    });
    let x = z * task.basis.transpose();
    let mut y = &x * &task.theta;
    if task.sigma > 0.0 {
        let noise = Normal::new(0.0, task.sigma).expect("sigma is finite and positive");
        for v in y.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        generate_gaussian_dataset(GaussianSpec { n_classes: 4, per_class: 3, dim: 2, class_spread: 1.0, within_noise: 1.0 }, 1).unwrap()
    }

    #[test]
    fn zero_noise_examples_equal_mean() {
        let d = generate_gaussian_dataset(GaussianSpec { n_classes: 3, per_class: 3, dim: 4, class_spread: 2.0, within_noise: 0.0 }, 9)
            .unwrap();
        for c in 0..3 {
            assert_eq!(d.example(c, 0), d.example(c, 1));
            assert_eq!(d.example(c, 0), d.example(c, 2));
        }
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        assert_eq!(tiny(), tiny());
    }

    #[test]
    fn dataset_rejects_ragged_classes() {
        let ex = vec![vec![vec![0.0]; 2], vec![vec![0.0]; 3]];
        assert!(Dataset::new(ex, SplitTag::Train).is_err());
        let ex = vec![vec![vec![0.0], vec![0.0, 1.0]]];
        assert!(Dataset::new(ex, SplitTag::Train).is_err());
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let d = tiny();
        let back = Dataset::from_csv_str(&d.to_csv_string(), SplitTag::Train).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::from_csv_str("2,2,1\n0,1\n0,2\n1,3\n", SplitTag::Train).is_err());
        assert!(Dataset::from_csv_str("1,1,2\n0,1\n", SplitTag::Train).is_err());
        assert!(Dataset::from_csv_str("1,1,1\n5,1\n", SplitTag::Train).is_err());
        // rows may interleave classes
        let d = Dataset::from_csv_str("2,1,1\n1,7\n0,3\n", SplitTag::Test).unwrap();
        assert_eq!(d.example(0, 0), &[3.0]);
        assert_eq!(d.example(1, 0), &[7.0]);
    }

    #[test]
    fn full_pool_takes_everything() {
        let d = tiny();
        let p = sample_support_pool(&d, 3, 4).unwrap();
        for c in 0..4 {
            assert_eq!(p.class_indices(c), &[0, 1, 2]);
        }
        assert!(matches!(sample_support_pool(&d, 4, 0), Err(Error::ShotCount { .. })));
    }

    #[test]
    fn pools_differ_across_seeds() {
        let d = generate_gaussian_dataset(GaussianSpec { n_classes: 2, per_class: 600, dim: 1, class_spread: 1.0, within_noise: 1.0 }, 0)
            .unwrap();
        let a = sample_support_pool(&d, 5, 1).unwrap();
        let b = sample_support_pool(&d, 5, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, sample_support_pool(&d, 5, 1).unwrap());
    }

    #[test]
    fn ml_episode_shape() {
        let d = tiny();
        let cfg = TaskConfig::new(4, 1, 2);
        let ep = sample_episode_ml(&d, &cfg, 3).unwrap();
        assert_eq!(ep.classes, vec![0, 1, 2, 3]);
        assert_eq!(ep.support.len(), 4);
        assert_eq!(ep.query.len(), 8);
        for c in 0..4 {
            let mut used: Vec<usize> = ep.support.iter().chain(&ep.query).filter(|e| e.label == c).map(|e| e.source.index).collect();
            used.sort_unstable();
            assert_eq!(used, vec![0, 1, 2]);
        }
        assert!(sample_episode_ml(&d, &TaskConfig::new(2, 2, 2), 0).is_err());
        assert!(sample_episode_ml(&d, &TaskConfig::new(5, 1, 1), 0).is_err());
    }

    #[test]
    fn pool_episode_support_is_deterministic() {
        let d = tiny();
        let pool = sample_support_pool(&d, 1, 11).unwrap();
        let cfg = TaskConfig::new(4, 1, 2);
        let a = sample_episode_from_pool(&d, &pool, &cfg, 1).unwrap();
        let b = sample_episode_from_pool(&d, &pool, &cfg, 2).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.support, b.support);
        // query is forced to the two non-pool examples
        for ep in [&a, &b] {
            for item in &ep.query {
                assert!(!pool.class_indices(item.source.class).contains(&item.source.index));
            }
        }
        let bad = TaskConfig::new(2, 2, 1);
        assert!(sample_episode_from_pool(&d, &pool, &bad, 0).is_err());
    }

    #[test]
    fn pool_counts() {
        assert!((count_support_pools_log10(64, 600, 5).unwrap() - 755.5).abs() < 0.1);
        assert!(count_support_pools_log10(1, 5, 5).unwrap().abs() < 1e-12);
        assert!((count_support_pools_log10(2, 3, 1).unwrap() - 9f64.log10()).abs() < 1e-12);
        assert!((count_reduction_factor_log10(600, 5, 5).unwrap() - 59.0).abs() < 0.1);
        assert!(count_reduction_factor_log10(7, 7, 3).unwrap().abs() < 1e-12);
        assert!((count_reduction_factor_log10(3, 1, 2).unwrap() - 9f64.log10()).abs() < 1e-12);
        assert!(count_support_pools_log10(1, 2, 3).is_err());
    }

    #[test]
    fn pool_count_matches_enumeration() {
        for (n, per, k) in [(2, 3, 1), (3, 4, 2), (2, 5, 2), (1, 6, 3)] {
            let d = Dataset::new(vec![vec![vec![0.0]; per]; n], SplitTag::Train).unwrap();
            let count = enumerate_pools(&d, k).unwrap().len() as f64;
            assert!((count.log10() - count_support_pools_log10(n, per, k).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_point_masses() {
        let mut meta = RegressionMetaDistribution::simple(vec![1.0, -2.0], vec![0.0, 0.0], vec![1.0, 3.0]);
        let a = sample_regression_task(&meta, 1).unwrap();
        let b = sample_regression_task(&meta, 2).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.sigma, 0.0);
        meta.couple_spectrum_to_theta = true;
        meta.theta.mean = vec![0.0, -2.0];
        let c = sample_regression_task(&meta, 3).unwrap();
        assert_eq!(c.spectrum.as_slice(), &[COUPLED_SPECTRUM_FLOOR, 2.0]);
    }

    #[test]
    fn noiseless_residual_is_zero() {
        let t = RegressionTask::diagonal(&[1.0, -1.0, 0.5], &[1.0, 2.0, 3.0], 0.0);
        let (x, y) = sample_regression_data(&t, 50, 3).unwrap();
        assert_eq!((y - x * &t.theta).amax(), 0.0);
    }

    #[test]
    fn invalid_meta_rejected() {
        let mut meta = RegressionMetaDistribution::simple(vec![0.0], vec![1.0], vec![0.0]);
        assert!(meta.validate().is_err());
        meta.spectrum = SpectrumLaw::Fixed(vec![1.0]);
        meta.basis = Arc::new(DMatrix::from_element(1, 1, 2.0));
        assert!(meta.validate().is_err());
    }
}
