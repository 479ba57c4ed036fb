//! Small dense linear algebra: the regression normal equations and the
//! `p × p` Newton systems of the proximal step. Matrices are row-major slices.

use alloc::vec;
use alloc::vec::Vec;

/// Outcome of a ridge-regularized Cholesky solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CholeskyInfo {
    /// Ridge actually added to the diagonal.
    pub ridge: f64,
    /// A pivot fell below `1e-8 ×` the largest diagonal entry; the system was
    /// effectively rank deficient and the ridge selected the solution.
    pub rank_deficient: bool,
}

/// Factors `G + ridge·I` in place (lower triangle), `ridge = ridge_rel ·
/// trace(G)`.
fn factor_ridge(gram: &mut [f64], m: usize, ridge_rel: f64) -> CholeskyInfo {
    debug_assert_eq!(gram.len(), m * m);
    let mut trace = 0.0;
    let mut max_diag: f64 = 0.0;
    for i in 0..m {
        trace += gram[i * m + i];
        max_diag = max_diag.max(gram[i * m + i]);
    }
    let mut ridge = ridge_rel * trace;
    if ridge <= 0.0 {
        ridge = f64::MIN_POSITIVE;
    }
    for i in 0..m {
        gram[i * m + i] += ridge;
    }
    let mut rank_deficient = false;
    for j in 0..m {
        let mut s = gram[j * m + j];
        for k in 0..j {
            s -= gram[j * m + k] * gram[j * m + k];
        }
        if s <= 1e-8 * max_diag {
            rank_deficient = true;
        }
        let d = libm::sqrt(s.max(ridge));
        gram[j * m + j] = d;
        for i in (j + 1)..m {
            let mut s = gram[i * m + j];
            for k in 0..j {
                s -= gram[i * m + k] * gram[j * m + k];
            }
            gram[i * m + j] = s / d;
        }
    }
    CholeskyInfo {
        ridge,
        rank_deficient,
    }
}

fn substitute(factor: &[f64], m: usize, rhs: &mut [f64], r: usize) {
    for c in 0..r {
        // L y = b
        for i in 0..m {
            let mut s = rhs[i * r + c];
            for k in 0..i {
                s -= factor[i * m + k] * rhs[k * r + c];
            }
            rhs[i * r + c] = s / factor[i * m + i];
        }
        // L^T x = y
        for i in (0..m).rev() {
            let mut s = rhs[i * r + c];
            for k in (i + 1)..m {
                s -= factor[k * m + i] * rhs[k * r + c];
            }
            rhs[i * r + c] = s / factor[i * m + i];
        }
    }
}

/// Solves `(G + ridge·I) C = R` in place for a symmetric positive
/// semidefinite `m × m` matrix `G` and `m × r` right-hand side `R`, with
/// `ridge = ridge_rel · trace(G)`. `G` is overwritten by its Cholesky factor.
pub fn cholesky_solve_ridge(
    gram: &mut [f64],
    m: usize,
    rhs: &mut [f64],
    r: usize,
    ridge_rel: f64,
) -> CholeskyInfo {
    debug_assert_eq!(rhs.len(), m * r);
    let info = factor_ridge(gram, m, ridge_rel);
    substitute(gram, m, rhs, r);
    info
}

/// Normal-equation solve `G C = R` regularized by a relative ridge, followed
/// by `refinements` steps of iterative refinement against the unregularized
/// `G`. Refinement removes the ridge bias when `G` is well conditioned and is
/// skipped when the factorization flags rank deficiency.
pub fn ridge_solve_refined(
    gram: &[f64],
    m: usize,
    rhs: &[f64],
    r: usize,
    ridge_rel: f64,
    refinements: usize,
) -> (Vec<f64>, CholeskyInfo) {
    let mut factor = gram.to_vec();
    let info = factor_ridge(&mut factor, m, ridge_rel);
    let mut sol = rhs.to_vec();
    substitute(&factor, m, &mut sol, r);
    if !info.rank_deficient {
        let mut resid = vec![0.0; m * r];
        for _ in 0..refinements {
            for i in 0..m {
                for c in 0..r {
                    let mut s = rhs[i * r + c];
                    for k in 0..m {
                        s -= gram[i * m + k] * sol[k * r + c];
                    }
                    resid[i * r + c] = s;
                }
            }
            substitute(&factor, m, &mut resid, r);
            for (x, d) in sol.iter_mut().zip(&resid) {
                *x += d;
            }
        }
    }
    (sol, info)
}

/// Gaussian elimination with partial pivoting; solves `A x = b` in place.
/// Returns `false` when `A` is numerically singular.
pub fn solve_dense(a: &mut [f64], n: usize, b: &mut [f64]) -> bool {
    if n == 1 {
        if a[0] == 0.0 || !a[0].is_finite() {
            return false;
        }
        b[0] /= a[0];
        return true;
    }
    for col in 0..n {
        let mut piv = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col] == 0.0 || !a[piv * n + col].is_finite() {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for row in (col + 1)..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    if n == 1 {
        return vec![m[0]];
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        // G = [[4, 2], [2, 3]], b = [2, 1] -> x = [0.5, 0]
        let mut g = [4.0, 2.0, 2.0, 3.0];
        let mut b = [2.0, 1.0];
        let info = cholesky_solve_ridge(&mut g, 2, &mut b, 1, 0.0);
        assert!(!info.rank_deficient);
        assert!((b[0] - 0.5).abs() < 1e-12 && b[1].abs() < 1e-12);
    }

    #[test]
    fn cholesky_flags_singular_gram() {
        // two identical columns
        let mut g = [1.0, 1.0, 1.0, 1.0];
        let mut b = [2.0, 2.0];
        let info = cholesky_solve_ridge(&mut g, 2, &mut b, 1, 1e-10);
        assert!(info.rank_deficient);
        // least-norm solution splits the weight evenly
        assert!((b[0] - 1.0).abs() < 1e-6 && (b[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn refinement_removes_ridge_bias() {
        let g = [4.0, 2.0, 2.0, 3.0];
        let b = [2.0, 1.0];
        let (x, _) = ridge_solve_refined(&g, 2, &b, 1, 1e-4, 0);
        assert!((x[0] - 0.5).abs() > 1e-6);
        let (x, info) = ridge_solve_refined(&g, 2, &b, 1, 1e-4, 3);
        assert!(!info.rank_deficient);
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn dense_solve_with_pivoting() {
        let mut a = [0.0, 1.0, 2.0, 1.0];
        let mut b = [3.0, 4.0];
        assert!(solve_dense(&mut a, 2, &mut b));
        // 2x + y = 4, y = 3
        assert!((b[0] - 0.5).abs() < 1e-14 && (b[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = [2.0, 1.0, 1.0, 2.0];
        let ev = symmetric_eigenvalues(&a, 2);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
