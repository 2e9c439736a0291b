//! Tensors, reverse-mode gradients, seeded randomness and the
//! finite-difference gradient oracle.

mod adam;
mod finite_diff;
mod rng;
mod tape;
mod tensor;

pub use adam::Adam;
pub use finite_diff::finite_diff_grad;
pub use rng::RngStream;
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::{vecops, TensorValue};
