//! Order-independent fan-out and reductions.
//!
//! Work items are mapped (in parallel when the `parallel` feature is on) into
//! a vector whose order matches the input order, then reduced serially with a
//! fixed pairwise tree. Results are bit-identical for any worker count.

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` inside a pool with exactly `workers` threads (0 = library default).
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

const LEAF: usize = 8;

/// Pairwise summation with a fixed split rule.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        xs.iter().fold(0.0, |a, &b| a + b)
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Elementwise pairwise sum of equal-length vectors.
pub fn pairwise_sum_vecs(vs: &[Vec<f64>]) -> Vec<f64> {
    match vs.len() {
        0 => Vec::new(),
        1 => vs[0].clone(),
        n if n <= 2 => {
            let mut out = vs[0].clone();
            for (o, x) in out.iter_mut().zip(&vs[1]) {
                *o += x;
            }
            out
        }
        n => {
            let mid = n / 2;
            let mut a = pairwise_sum_vecs(&vs[..mid]);
            let b = pairwise_sum_vecs(&vs[mid..]);
            for (o, x) in a.iter_mut().zip(&b) {
                *o += x;
            }
            a
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample standard deviation (0 for fewer than two samples).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&sq) / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn vec_sum() {
        let vs = vec![vec![1.0, 2.0]; 5];
        assert_eq!(pairwise_sum_vecs(&vs), vec![5.0, 10.0]);
    }

    #[test]
    fn parallel_map_is_worker_independent() {
        let f = |i: usize| ((i as f64) * 0.1).sin();
        let a = with_workers(1, || pairwise_sum(&map_indexed(10_000, f)));
        let b = with_workers(4, || pairwise_sum(&map_indexed(10_000, f)));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
