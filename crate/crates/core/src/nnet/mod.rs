//! Minimal dense network core: SiLU MLPs with exact reverse-mode gradients,
//! Adam, and a reduce-on-plateau learning-rate schedule.

mod adam;
mod mlp;
mod plateau;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{sigmoid, Activation, MlpCheckpoint, MlpSpec, MlpTape, OutputBounds, ParamVector};
pub use plateau::{PlateauConfig, PlateauState};
