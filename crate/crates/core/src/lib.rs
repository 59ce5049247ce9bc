//! Optimal execution with a broker: the independents' equilibrium, the
//! broker's optimal flow, client valuation and portfolio search.

// negated comparisons reject NaN on purpose; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod broker;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod experiments;
pub mod model;
pub mod montecarlo;
pub mod search;
pub mod valuation;

pub use error::{Error, Result};
pub use model::*;
