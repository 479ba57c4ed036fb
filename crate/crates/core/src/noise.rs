use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::grid::{EnsembleShape, TimeGrid};
use crate::rng;

const REGRESSION_BLOCK: u32 = 0x8000_0000;

/// Brownian increments `ΔW[path][step][component]`, each `N(0, dt)`, stored
/// step-major (all paths of step 0, then step 1, ...).
///
/// Entry `(path, step, component)` is a pure function of
/// `(seed, path, step, component)`: regenerating with the same seed is
/// bit-identical and independent of the order entries are produced in.
/// Regression paths (see [`EnsembleShape`]) draw from a disjoint counter block,
/// so adding them never changes the evaluation paths.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    shape: EnsembleShape,
    grid: TimeGrid,
    seed: u64,
    increments: Vec<f64>,
}

fn draw(seed: u64, block: u32, path: usize, step: usize, comp: usize, sd: f64) -> f64 {
    let counter = [
        path as u32,
        ((path as u64 >> 32) as u32) | block,
        step as u32,
        (comp / 2) as u32,
    ];
    rng::normal_pair(seed, counter)[comp % 2] * sd
}

impl BrownianEnsemble {
    pub fn sample(seed: u64, shape: EnsembleShape, grid: TimeGrid) -> Self {
        let n = grid.n_steps();
        let dw = shape.d_w;
        let sd = libm::sqrt(grid.dt());
        let mut increments = vec![0.0; shape.total_paths() * n * dw];
        for path in 0..shape.total_paths() {
            let (block, local) = if path < shape.n_paths {
                (0, path)
            } else {
                (REGRESSION_BLOCK, path - shape.n_paths)
            };
            for step in 0..n {
                let base = (step * shape.total_paths() + path) * dw;
                for comp in 0..dw {
                    increments[base + comp] = draw(seed, block, local, step, comp, sd);
                }
            }
        }
        Self {
            shape,
            grid,
            seed,
            increments,
        }
    }

    pub fn shape(&self) -> &EnsembleShape {
        &self.shape
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ΔW` on `[t_step, t_{step+1})` for one path.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let dw = self.shape.d_w;
        let base = (step * self.shape.total_paths() + path) * dw;
        &self.increments[base..base + dw]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `W(t_k)` for one path: the sum of increments `0..k`.
    pub fn value_at(&self, path: usize, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.shape.d_w];
        for step in 0..k {
            for (acc, inc) in w.iter_mut().zip(self.increment(path, step)) {
                *acc += inc;
            }
        }
        w
    }

    /// The same Brownian paths observed on a grid `factor` times coarser:
    /// consecutive increments are summed.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        let n = self.grid.n_steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(invalid(format!(
                "cannot coarsen {n} steps by a factor of {factor}"
            )));
        }
        let grid = TimeGrid::new(self.grid.horizon(), n / factor)?;
        let dw = self.shape.d_w;
        let nc = grid.n_steps();
        let mut increments = vec![0.0; self.shape.total_paths() * nc * dw];
        for path in 0..self.shape.total_paths() {
            for step in 0..nc {
                for sub in 0..factor {
                    let inc = self.increment(path, step * factor + sub);
                    for comp in 0..dw {
                        increments[(step * self.shape.total_paths() + path) * dw + comp] += inc[comp];
                    }
                }
            }
        }
        Ok(Self {
            shape: self.shape,
            grid,
            seed: self.seed,
            increments,
        })
    }

    /// Copy with the evaluation paths' increments at steps `>= from_step`
    /// replaced by fresh draws from `fresh_seed`. Regression paths are left
    /// untouched: they are estimator data, not part of the sample space the
    /// controls live on.
    pub fn with_future_replaced(&self, from_step: usize, fresh_seed: u64) -> Self {
        let mut out = self.clone();
        let n = self.grid.n_steps();
        let dw = self.shape.d_w;
        let sd = libm::sqrt(self.grid.dt());
        for path in 0..self.shape.n_paths {
            for step in from_step.min(n)..n {
                for comp in 0..dw {
                    out.increments[(step * self.shape.total_paths() + path) * dw + comp] =
                        draw(fresh_seed, 0, path, step, comp, sd);
                }
            }
        }
        out
    }
}
