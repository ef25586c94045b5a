use serde::{Deserialize, Serialize};

use super::equilibria::{classify_stability, find_equilibria_1d, EquilibriumPoint, Stability};
use crate::dynamics::SplitField;
use crate::error::{check_len, Error, Result};
use crate::par;

/// Which scalar function the sweep finds zeros of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualKind {
    /// `x − g(x, u)`.
    EquilibriumMap,
    /// `F(x, u)`; needed where `g` itself has a pole, as in the analytic
    /// hysteresis split at `x = 0`.
    VectorField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub control_index: usize,
    /// Remaining control components, with the swept one overwritten.
    pub base_control: Vec<f64>,
    pub grid: Vec<f64>,
    pub state_lo: f64,
    pub state_hi: f64,
    pub n_scan: usize,
    pub residual: ResidualKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationDiagram {
    pub control_index: usize,
    pub grid: Vec<f64>,
    /// Equilibria per grid value, sorted by state.
    pub branches: Vec<Vec<EquilibriumPoint>>,
    /// Midpoints of the grid cells across which the equilibrium count changes.
    pub tipping_points: Vec<f64>,
}

impl BifurcationDiagram {
    pub fn points(&self) -> impl Iterator<Item = &EquilibriumPoint> {
        self.branches.iter().flatten()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.branches.iter().map(Vec::len).collect()
    }
}

/// Equilibria and their stability along one control axis of a scalar-state field.
pub fn bifurcation_sweep(field: &impl SplitField, cfg: &SweepConfig) -> Result<BifurcationDiagram> {
    if field.state_dim() != 1 {
        return Err(Error::InvalidConfig("bifurcation sweeps need a scalar state".into()));
    }
    check_len("base control", field.control_dim(), cfg.base_control.len())?;
    if cfg.control_index >= cfg.base_control.len() {
        return Err(Error::InvalidConfig(format!("control index {} out of range", cfg.control_index)));
    }
    if cfg.grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("sweep grid must be increasing".into()));
    }
    let branches = par::try_map(&cfg.grid, |&value| {
        let mut u = cfg.base_control.clone();
        u[cfg.control_index] = value;
        let residual = |x: f64| match cfg.residual {
            ResidualKind::EquilibriumMap => field.residual(&[x], &u)[0],
            ResidualKind::VectorField => field.field(&[x], &u)[0],
        };
        find_equilibria_1d(residual, cfg.state_lo, cfg.state_hi, cfg.n_scan)
            .into_iter()
            .map(|x| {
                let stability = classify_stability(|y| field.field(y, &u), &[x])?;
                Ok(EquilibriumPoint {
                    x_star: vec![x],
                    u: u.clone(),
                    stability,
                    residual_norm: residual(x).abs(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let tipping_points = tipping_points(&cfg.grid, &branches.iter().map(Vec::len).collect::<Vec<_>>());
    Ok(BifurcationDiagram {
        control_index: cfg.control_index,
        grid: cfg.grid.clone(),
        branches,
        tipping_points,
    })
}

fn tipping_points(grid: &[f64], counts: &[usize]) -> Vec<f64> {
    grid.windows(2)
        .zip(counts.windows(2))
        .filter(|(_, c)| c[0] != c[1])
        .map(|(g, _)| 0.5 * (g[0] + g[1]))
        .collect()
}

/// Checks that, across every tipping cell, the count changes by two and the
/// side with more equilibria has both a stable and an unstable one.
pub fn folds_are_saddle_nodes(diagram: &BifurcationDiagram) -> bool {
    diagram.branches.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        if a.len() == b.len() {
            return true;
        }
        let richer = if a.len() > b.len() { a } else { b };
        a.len().abs_diff(b.len()) == 2
            && richer.iter().any(|p| p.stability == Stability::Stable)
            && richer.iter().any(|p| p.stability == Stability::Unstable)
    })
}
