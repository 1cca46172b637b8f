#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN as well

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod fock;
pub mod frames;
pub mod linalg;
pub mod pulses;

pub use error::{Error, Result};
pub use linalg::C64;
