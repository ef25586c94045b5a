//! Equilibria, stability, bifurcation sweeps and tracking metrics.

mod bifurcation;
mod equilibria;
mod metrics;

pub use bifurcation::{bifurcation_sweep, folds_are_saddle_nodes, BifurcationDiagram, ResidualKind, SweepConfig};
pub use equilibria::{
    classify_stability, contraction_bound, fd_jacobian, find_equilibria_1d, find_equilibria_nd, max_real_eigenvalue,
    EquilibriumPoint, NdRoots, Stability, EQUILIBRIUM_TOL,
};
pub use metrics::{iqr, nrmse, percentile, tail_window, MagnitudeKind, MetricsReport};
