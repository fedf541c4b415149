//! Optimal execution under transient price impact: a simulated market, the
//! closed-form optimal schedule, and a deep deterministic policy gradient
//! agent that learns the schedule from interaction.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_form;
pub mod ddpg;
pub mod error;
pub mod experiments;
pub mod market;
pub mod neural;
pub mod rl;

pub use error::{Error, Result};
