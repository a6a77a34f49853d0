use alloc::format;
use alloc::vec::Vec;

use crate::assembly::AssembledSystem;
use crate::error::{Error, Result};

/// Knots `0 = t_0 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Self {
        assert!(steps > 0, "grid needs at least one step");
        let knots = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        Self { knots }
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::BadPartition { field: "grid".into(), reason: "knots must start at 0 and increase".into() });
        }
        Ok(Self { knots })
    }

    /// Uniform grid on the system horizon; every coefficient breakpoint
    /// must fall on a knot (snapped exactly when within rounding).
    pub fn for_system(sys: &AssembledSystem, steps: usize) -> Result<Self> {
        let mut g = Self::uniform(sys.horizon, steps);
        let h = sys.horizon / steps as f64;
        for &b in &sys.starts[1..] {
            let k = libm::round(b / h) as usize;
            if ((k as f64) * h - b).abs() > 1e-9 * sys.horizon {
                return Err(Error::BadPartition {
                    field: "grid".into(),
                    reason: format!("breakpoint {b} is not a knot of the {steps}-step grid"),
                });
            }
            g.knots[k] = b;
        }
        Ok(g)
    }

    /// Uniform grid merged with the system breakpoints.
    pub fn refining(sys: &AssembledSystem, steps: usize) -> Self {
        let mut knots = Self::uniform(sys.horizon, steps).knots;
        knots.extend_from_slice(&sys.starts);
        knots.sort_by(f64::total_cmp);
        knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * sys.horizon);
        Self { knots }
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn t(&self, k: usize) -> f64 {
        self.knots[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.knots[k + 1] - self.knots[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }
}
