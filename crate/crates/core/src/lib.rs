// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detector;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod lifted;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod special;
pub mod synthesis;

pub use error::{Error, Result};
