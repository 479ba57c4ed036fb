use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps must be at least 1"));
        }
        Ok(Self {
            horizon,
            n_steps,
            dt: horizon / n_steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `t_k = k·dt`, with the last node pinned to `T` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.n_steps * factor)
    }
}

/// Sizes of a simulation ensemble.
///
/// `n_paths` is the evaluation sample: every expectation (cost, norms, inner
/// products) is a mean over these paths. `n_regression` optionally adds an
/// independent block of paths, stored after the evaluation paths, on which the
/// adjoint regressions are fitted. With `n_regression = 0` the regressions are
/// fitted in-sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleShape {
    pub n_paths: usize,
    pub n_regression: usize,
    pub d: usize,
    pub d_w: usize,
    pub p: usize,
}

impl EnsembleShape {
    pub fn new(n_paths: usize, d: usize, d_w: usize, p: usize) -> Result<Self> {
        let shape = Self {
            n_paths,
            n_regression: 0,
            d,
            d_w,
            p,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Scalar state, noise and control.
    pub fn scalar(n_paths: usize) -> Result<Self> {
        Self::new(n_paths, 1, 1, 1)
    }

    pub fn with_regression_paths(mut self, n_regression: usize) -> Self {
        self.n_regression = n_regression;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_paths", self.n_paths),
            ("d", self.d),
            ("d_w", self.d_w),
            ("p", self.p),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Evaluation plus regression paths.
    pub fn total_paths(&self) -> usize {
        self.n_paths + self.n_regression
    }

    /// Paths the regressions are fitted on.
    pub fn fit_range(&self) -> core::ops::Range<usize> {
        if self.n_regression > 0 {
            self.n_paths..self.n_paths + self.n_regression
        } else {
            0..self.n_paths
        }
    }
}
