//! Reverse-mode differentiation and the handful of layers the scoring
//! network is built from.

mod adam;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use norm::{Mode, RunningStats};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
