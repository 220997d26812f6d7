//! Minimal neural-network toolkit: autodiff tape, parameter storage, LSTM cell
//! and the Adam optimizer.

mod lstm;
mod optim;
mod params;
mod tape;

pub use lstm::LstmCell;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, softmax, Gradients, Tape, Tensor, Var};

/// Initialization range for all trainable parameters.
pub const INIT_SCALE: f64 = 0.08;
