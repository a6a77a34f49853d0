//! Level-indexed weighted samples: tree nodes or Monte Carlo paths.

use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// One vector per sample per time level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelProcess {
    pub dim: usize,
    pub levels: Vec<Vec<DVector<f64>>>,
}

impl LevelProcess {
    pub fn zeros(dim: usize, sizes: impl IntoIterator<Item = usize>) -> Self {
        let levels = sizes.into_iter().map(|s| alloc::vec![DVector::zeros(dim); s]).collect();
        Self { dim, levels }
    }

    pub fn from_fn(dim: usize, sizes: impl IntoIterator<Item = usize>, mut f: impl FnMut(usize, usize) -> DVector<f64>) -> Self {
        let levels = sizes
            .into_iter()
            .enumerate()
            .map(|(k, s)| (0..s).map(|j| f(k, j)).collect())
            .collect();
        Self { dim, levels }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &[DVector<f64>] {
        &self.levels[k]
    }

    /// Weighted mean of level `k`.
    pub fn mean(&self, k: usize, weights: &[f64]) -> DVector<f64> {
        weighted_mean(self.dim, &self.levels[k], weights)
    }

    pub fn map(&self, dim: usize, mut f: impl FnMut(usize, usize, &DVector<f64>) -> DVector<f64>) -> Self {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| l.iter().enumerate().map(|(j, v)| f(k, j, v)).collect())
            .collect();
        Self { dim, levels }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).amax()))
            .fold(0.0, f64::max)
    }

    /// Shape check against level sizes.
    pub fn check_shape(&self, name: &str, dim: usize, sizes: &[usize]) -> Result<()> {
        let ok = self.dim == dim
            && self.levels.len() == sizes.len()
            && self.levels.iter().zip(sizes).all(|(l, &s)| l.len() == s && l.iter().all(|v| v.len() == dim));
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                field: name.into(),
                expected: (dim, sizes.len()),
                found: (self.dim, self.levels.len()),
            })
        }
    }
}

pub fn weighted_mean(dim: usize, vals: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let mut m = DVector::zeros(dim);
    for (v, &w) in vals.iter().zip(weights) {
        m.axpy(w, v, 1.0);
    }
    m
}

/// Processes of the game system and its backward rewriting on a common
/// set of levels. Knot processes have one more level than step processes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    /// Sample weights per knot level.
    pub weights: Vec<Vec<f64>>,
    /// State, on knots.
    pub x: LevelProcess,
    /// Agents' adjoints, on knots.
    pub y_agents: LevelProcess,
    /// Agents' adjoint noise coefficients, on steps.
    pub z_agents: LevelProcess,
    /// Diffusion of the state, on steps.
    pub q: Option<LevelProcess>,
    /// Backward-system control, on steps.
    pub v: Option<LevelProcess>,
    /// Regulator control, on steps.
    pub u0: Option<LevelProcess>,
}

impl TrajectoryBundle {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step_sizes(&self) -> Vec<usize> {
        self.weights[..self.steps()].iter().map(|w| w.len()).collect()
    }

    pub fn knot_sizes(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.len()).collect()
    }
}
