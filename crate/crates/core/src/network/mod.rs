//! Differentiable fully connected networks, Adam, finite-difference checks
//! and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod tape;

pub use adam::{AdamConfig, AdamState, Update};
pub use checkpoint::{Checkpoint, RngState};
pub use gradcheck::{check_gradients, GradCheckOptions, GradientReport, TensorCheck};
pub use mlp::{Activation, Layer, MlpParams, MlpVars};
pub use tape::{Gradients, Tape, Var};
