//! Certified training toolkit.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod net;
pub mod interval;
pub mod connector;
pub mod attack;
pub mod loss;
pub mod data;
pub mod train;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;
