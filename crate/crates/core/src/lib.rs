//! Monte-Carlo toolkit for variational representations on path space.
//!
//! The crate samples adapted shifts `W^u` of several base measures on a
//! uniform grid, estimates Girsanov densities and relative entropies,
//! conditions on stopping times, solves the control problem
//! `inf_u E[f∘W^u + ½|u|_H^2 | F_τ]`, approximates densities by retarded
//! shifts and checks a conditional Prékopa–Leindler inequality.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod conditioning;
pub mod error;
pub mod functional;
pub mod girsanov;
pub mod models;
pub mod oracle;
pub mod path_engine;
pub mod pipeline;
pub mod policy;
pub mod prekopa;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
