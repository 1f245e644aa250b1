// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod design;
pub mod error;
pub mod family;
pub mod fit;
pub mod inference;
pub mod simgen;
pub mod linalg;

pub use error::{Error, Result};
