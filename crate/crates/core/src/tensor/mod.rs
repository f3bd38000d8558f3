//! Dense `f64` tensors with a reverse-mode tape.

mod array;
mod conv;
pub mod gradcheck;
pub mod ops;
mod rng;
mod tape;

pub use array::{pairwise_sum, Tensor};
pub use conv::ConvGeom;
pub use ops::{log_mean_exp, log_sum_exp, normalized_weights, softmax_tensor};
pub use rng::SeededRng;
pub use tape::{Gradients, NodeId, Tape, Var};
