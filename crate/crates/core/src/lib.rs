// Negated float comparisons are used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod entropy;
pub mod error;
pub mod experiments;
pub mod models;
pub mod quadrature;
pub mod smc;
pub mod surrogate;

pub use error::{ArtError, Result};
