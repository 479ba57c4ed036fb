//! Path-by-time arrays and the discrete `L²`-progressive geometry.
//!
//! Controls use the left-endpoint convention: `α[path][k]` acts on
//! `[t_k, t_{k+1})`. Every expectation is a mean over the evaluation paths of
//! a Riemann sum `Σ_k (·)·dt`; regression paths, when present, are carried
//! along but never enter a norm.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::grid::{EnsembleShape, TimeGrid};
use crate::stats;

/// Open-loop control values `α[path][step][p]`, `step < n_steps`.
///
/// Storage is step-major: the `p` values of `(path, step)` start at
/// `(step · total_paths + path) · p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    shape: EnsembleShape,
    grid: TimeGrid,
    values: Vec<f64>,
}

impl ControlField {
    pub fn zeros(shape: EnsembleShape, grid: TimeGrid) -> Self {
        let len = shape.total_paths() * grid.n_steps() * shape.p;
        Self {
            shape,
            grid,
            values: vec![0.0; len],
        }
    }

    pub fn constant(shape: EnsembleShape, grid: TimeGrid, value: &[f64]) -> Result<Self> {
        if value.len() != shape.p {
            return Err(invalid(format!(
                "constant control has {} components, expected {}",
                value.len(),
                shape.p
            )));
        }
        let mut f = Self::zeros(shape, grid);
        for chunk in f.values.chunks_exact_mut(shape.p) {
            chunk.copy_from_slice(value);
        }
        Ok(f)
    }

    /// Fills every `(path, step)` from `fill(path, step, out)`.
    pub fn from_fn(
        shape: EnsembleShape,
        grid: TimeGrid,
        mut fill: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut f = Self::zeros(shape, grid);
        let n = f.grid.n_steps();
        let p = shape.p;
        for path in 0..shape.total_paths() {
            for k in 0..n {
                let base = (k * shape.total_paths() + path) * p;
                fill(path, k, &mut f.values[base..base + p]);
            }
        }
        f
    }

    pub fn from_values(shape: EnsembleShape, grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let len = shape.total_paths() * grid.n_steps() * shape.p;
        if values.len() != len {
            return Err(invalid(format!(
                "control field needs {len} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            grid,
            values,
        })
    }

    pub fn shape(&self) -> &EnsembleShape {
        &self.shape
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let p = self.shape.p;
        let base = (step * self.shape.total_paths() + path) * p;
        &self.values[base..base + p]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let p = self.shape.p;
        let base = (step * self.shape.total_paths() + path) * p;
        &mut self.values[base..base + p]
    }

    pub fn is_compatible(&self, other: &ControlField) -> bool {
        self.shape == other.shape && self.grid == other.grid
    }

    fn check(&self, other: &ControlField) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(invalid("control fields differ in shape or grid"))
        }
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, other: &ControlField, c: f64) -> Result<ControlField> {
        self.check(other)?;
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o += c * v;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &ControlField) -> Result<ControlField> {
        self.add_scaled(other, -1.0)
    }

    /// `(1 − θ)·self + θ·other`.
    pub fn lerp(&self, other: &ControlField, theta: f64) -> Result<ControlField> {
        self.check(other)?;
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o += theta * (v - *o);
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> ControlField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-path `Σ_k g(path, k)·dt` over the evaluation paths, then the mean.
pub(crate) fn path_mean_of_time_sum(
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    mut g: impl FnMut(usize, usize) -> f64,
) -> f64 {
    // step-outer to follow the storage; each path still sums k = 0, 1, ...
    let mut per_path = vec![0.0; n_paths];
    for k in 0..n_steps {
        for (path, s) in per_path.iter_mut().enumerate() {
            *s += g(path, k);
        }
    }
    per_path.iter_mut().for_each(|s| *s *= dt);
    stats::mean(&per_path)
}

/// Estimator of `E ∫₀ᵀ |α_t|² dt`.
pub fn control_norm_sq(alpha: &ControlField) -> f64 {
    let n = alpha.grid.n_steps();
    path_mean_of_time_sum(alpha.shape.n_paths, n, alpha.grid.dt(), |path, k| {
        alpha.at(path, k).iter().map(|v| v * v).sum()
    })
}

/// Estimator of `E ∫₀ᵀ α_t · β_t dt`.
pub fn control_inner(alpha: &ControlField, beta: &ControlField) -> Result<f64> {
    alpha.check(beta)?;
    let n = alpha.grid.n_steps();
    Ok(path_mean_of_time_sum(
        alpha.shape.n_paths,
        n,
        alpha.grid.dt(),
        |path, k| {
            alpha
                .at(path, k)
                .iter()
                .zip(beta.at(path, k))
                .map(|(a, b)| a * b)
                .sum()
        },
    ))
}

/// `‖α − β‖` in the discrete `L²`-progressive norm.
pub fn control_distance(alpha: &ControlField, beta: &ControlField) -> Result<f64> {
    alpha.check(beta)?;
    let n = alpha.grid.n_steps();
    let sq = path_mean_of_time_sum(alpha.shape.n_paths, n, alpha.grid.dt(), |path, k| {
        alpha
            .at(path, k)
            .iter()
            .zip(beta.at(path, k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    Ok(libm::sqrt(sq))
}

/// Forward states `X[path][k][d]` for `k = 0..=n_steps`, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths {
    shape: EnsembleShape,
    grid: TimeGrid,
    values: Vec<f64>,
}

impl StatePaths {
    pub(crate) fn from_values(shape: EnsembleShape, grid: TimeGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.total_paths() * (grid.n_steps() + 1) * shape.d);
        Self {
            shape,
            grid,
            values,
        }
    }

    pub fn shape(&self) -> &EnsembleShape {
        &self.shape
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        let d = self.shape.d;
        let base = (k * self.shape.total_paths() + path) * d;
        &self.values[base..base + d]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.at(path, self.grid.n_steps())
    }
}

/// Counters collected while producing an adjoint solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdjointDiagnostics {
    /// Time steps whose regression was rank deficient (solved with the ridge).
    pub rank_deficient_steps: usize,
    /// Path-nodes outside the region where an analytic oracle is exact.
    pub nodes_outside_validity: usize,
}

/// Discrete adjoint processes.
///
/// * `y[path][k][d]`, `k = 0..=n_steps`, with `y[·][n_steps] = D_x g(X_T)`.
/// * `z[path][k][d][d_w]`, `k < n_steps`.
/// * `y_next[path][k][d]`, `k < n_steps`: the `F_{t_k}`-conditional mean of
///   `y[·][k+1]`. This is the costate that multiplies `D_a b` in the gradient
///   of the discrete cost with respect to `α[·][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    shape: EnsembleShape,
    grid: TimeGrid,
    y: Vec<f64>,
    z: Vec<f64>,
    y_next: Vec<f64>,
    pub diagnostics: AdjointDiagnostics,
}

impl AdjointSolution {
    pub(crate) fn zeros(shape: EnsembleShape, grid: TimeGrid) -> Self {
        let paths = shape.total_paths();
        let n = grid.n_steps();
        Self {
            y: vec![0.0; paths * (n + 1) * shape.d],
            z: vec![0.0; paths * n * shape.d * shape.d_w],
            y_next: vec![0.0; paths * n * shape.d],
            shape,
            grid,
            diagnostics: AdjointDiagnostics::default(),
        }
    }

    pub fn shape(&self) -> &EnsembleShape {
        &self.shape
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    pub fn y(&self, path: usize, k: usize) -> &[f64] {
        let d = self.shape.d;
        let base = (k * self.shape.total_paths() + path) * d;
        &self.y[base..base + d]
    }

    #[inline]
    pub(crate) fn y_mut(&mut self, path: usize, k: usize) -> &mut [f64] {
        let d = self.shape.d;
        let base = (k * self.shape.total_paths() + path) * d;
        &mut self.y[base..base + d]
    }

    #[inline]
    pub fn z(&self, path: usize, k: usize) -> &[f64] {
        let m = self.shape.d * self.shape.d_w;
        let base = (k * self.shape.total_paths() + path) * m;
        &self.z[base..base + m]
    }

    #[inline]
    pub(crate) fn z_mut(&mut self, path: usize, k: usize) -> &mut [f64] {
        let m = self.shape.d * self.shape.d_w;
        let base = (k * self.shape.total_paths() + path) * m;
        &mut self.z[base..base + m]
    }

    #[inline]
    pub fn y_next(&self, path: usize, k: usize) -> &[f64] {
        let d = self.shape.d;
        let base = (k * self.shape.total_paths() + path) * d;
        &self.y_next[base..base + d]
    }

    #[inline]
    pub(crate) fn y_next_mut(&mut self, path: usize, k: usize) -> &mut [f64] {
        let d = self.shape.d;
        let base = (k * self.shape.total_paths() + path) * d;
        &mut self.y_next[base..base + d]
    }

    /// Copy with every `Z` set to zero (used to plant defects in checks).
    pub fn with_zero_z(&self) -> Self {
        let mut out = self.clone();
        out.z.iter_mut().for_each(|v| *v = 0.0);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.y.iter().chain(&self.z).chain(&self.y_next).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(paths: usize) -> (EnsembleShape, TimeGrid) {
        (
            EnsembleShape::scalar(paths).unwrap(),
            TimeGrid::new(2.0, 8).unwrap(),
        )
    }

    #[test]
    fn zero_field_has_zero_norm() {
        let (s, g) = setup(5);
        assert_eq!(control_norm_sq(&ControlField::zeros(s, g)), 0.0);
    }

    #[test]
    fn constant_field_norm_is_c_squared_t() {
        let (s, g) = setup(5);
        let f = ControlField::constant(s, g, &[3.0]).unwrap();
        assert!((control_norm_sq(&f) - 18.0).abs() < 1e-12);
    }

    #[test]
    fn inner_with_zero_and_self() {
        let (s, g) = setup(4);
        let f = ControlField::from_fn(s, g, |p, k, o| o[0] = (p * 3 + k) as f64 * 0.1);
        let z = ControlField::zeros(s, g);
        assert_eq!(control_inner(&f, &z).unwrap(), 0.0);
        assert_eq!(control_inner(&f, &f).unwrap(), control_norm_sq(&f));
    }

    #[test]
    fn disjoint_support_is_orthogonal() {
        let (s, g) = setup(4);
        let a = ControlField::from_fn(s, g, |_, k, o| o[0] = if k < 4 { 1.0 } else { 0.0 });
        let b = ControlField::from_fn(s, g, |_, k, o| o[0] = if k >= 4 { 2.0 } else { 0.0 });
        assert_eq!(control_inner(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (s, g) = setup(4);
        let a = ControlField::zeros(s, g);
        let b = ControlField::zeros(EnsembleShape::scalar(5).unwrap(), g);
        assert!(control_inner(&a, &b).is_err());
    }

    #[test]
    fn regression_paths_do_not_enter_norms() {
        let (s, g) = setup(3);
        let s = s.with_regression_paths(2);
        let f = ControlField::from_fn(s, g, |p, _, o| o[0] = if p >= 3 { 100.0 } else { 1.0 });
        assert!((control_norm_sq(&f) - 2.0).abs() < 1e-12);
    }
}
