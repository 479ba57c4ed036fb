//! Deterministic reductions.
//!
//! All Monte Carlo averages go through [`pairwise_sum`], whose summation tree
//! depends only on the slice length, so results never depend on how the work
//! was scheduled.

const LEAF: usize = 32;

/// Sum with a fixed binary-tree topology.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean and standard error of the mean (sample standard deviation over `sqrt(n)`).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (mean(xs), 0.0);
    }
    let m = mean(xs);
    let mut dev = alloc::vec::Vec::with_capacity(n);
    dev.extend(xs.iter().map(|&x| (x - m) * (x - m)));
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, libm::sqrt(var / n as f64))
}
