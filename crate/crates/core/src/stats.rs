//! Small statistics and scheduling helpers.
//!
//! Parallel maps here are order-preserving and reductions are done
//! sequentially over the collected results, so outputs do not depend on the
//! worker count. That is the determinism contract every module leans on.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Sample mean and standard error of the mean (Kahan-compensated sums).
pub fn mean_and_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    if n == 0 {
        return MeanSe {
            mean: 0.0,
            std_error: 0.0,
            n: 0,
        };
    }
    let mean = kahan_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return MeanSe {
            mean,
            std_error: 0.0,
            n,
        };
    }
    let ss = kahan_sum(xs.iter().map(|&x| (x - mean) * (x - mean)));
    let var = ss / (n as f64 - 1.0);
    MeanSe {
        mean,
        std_error: (var / n as f64).sqrt(),
        n,
    }
}

pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let y = x - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Order-preserving parallel map over `0..n`.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Fallible order-preserving parallel map over `0..n`.
pub fn try_par_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Runs `f` inside a dedicated pool of `workers` threads; `None` uses the
/// ambient pool. Results are worker-count independent by construction, this
/// only caps concurrency.
pub fn install_workers<T, F>(workers: Option<usize>, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    match workers {
        None => f(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .expect("thread pool construction")
            .install(f),
    }
}

/// Evenly spaced grid of `n` points over [lo, hi] (inclusive); n >= 2.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se_matches_hand_values() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = mean_and_se(&xs);
        assert!((s.mean - 2.5).abs() < 1e-15);
        // var = 5/3, se = sqrt(5/12)
        assert!((s.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn par_map_preserves_order() {
        let v = par_map_indexed(1000, |i| i * i);
        for (i, x) in v.iter().enumerate() {
            assert_eq!(*x, i * i);
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let a = install_workers(Some(1), || par_map_indexed(257, |i| (i as f64).sin()));
        let b = install_workers(Some(8), || par_map_indexed(257, |i| (i as f64).sin()));
        assert_eq!(a, b);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-2.0, 2.0, 5);
        assert_eq!(g, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }
}
