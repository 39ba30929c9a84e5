//! Dense numeric core: matrices, MLPs with analytic backprop, Adam, a
//! splittable RNG, finite-difference checking and binary snapshots.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod rng;
pub mod snapshot;

pub use adam::Adam;
pub use gradcheck::{check_gradient, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{mse_loss, soft_update, Activation, Mlp, Tape};
pub use rng::Rng;
