#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod approximator;
pub mod baselines;
pub mod consensus;
pub mod exec;
pub mod learner;
pub mod linsys;
pub mod qp;
pub mod topology;
#[cfg(feature = "cli")]
pub mod cli;
