// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod codec;
pub mod densities;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod oracles;
pub mod quadrature;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ArchConfig, GridMode, Group, HierModel};
pub use tensor::{Gradients, SeededRng, Tape, Tensor, Var};
