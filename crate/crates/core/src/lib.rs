//! Learning asymptotically stable, multistable dynamics with the structured
//! vector field `F(x, u) = f(x) ⊙ (x - g(x, u))`, `f < 0`, and steering them
//! through the learned equilibrium map `g`.
//!
//! * [`nnet`]: dense SiLU networks with reverse-mode gradients, Adam, plateau scheduling.
//! * [`dynamics`]: the structured field and its cosine featurizer.
//! * [`integrate`]: RK4 (with an unrolled adjoint), Euler–Maruyama, finite differences.
//! * [`benchmarks`]: ground-truth systems, analytic splits, data protocols.
//! * [`training`]: gradient and trajectory matching, the training loop, k-fold CV.
//! * [`control`]: feedback through iterated `g`, smooth gates, linear theory.
//! * [`analysis`]: equilibria, stability, bifurcation sweeps, metrics.
//! * [`experiments`]: per-benchmark recipes and control-trial runners.

pub mod analysis;
pub mod benchmarks;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod integrate;
pub mod nnet;
pub mod par;
pub mod training;

pub use error::{Error, Result};
