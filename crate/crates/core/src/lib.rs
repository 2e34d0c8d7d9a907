// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod error;
mod linprog;
pub mod lp;
pub mod market;
pub mod nl;
pub mod model;
pub mod mpc;
pub mod ocv;
pub mod plant;

pub use error::{Error, Result};
