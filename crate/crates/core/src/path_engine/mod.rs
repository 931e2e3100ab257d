//! Time discretization, Brownian sampling, left-point stochastic integrals,
//! Cameron–Martin norms and the `π_τ` projection.

mod grid;
mod path;
mod rng;

pub use grid::{make_grid, TimeGrid, HORIZON};
pub use path::{
    cm_norm_sq, draw_increments, ito_integral, pi_tau, sample_brownian, CameronMartinPath,
    Projection, SamplePath,
};
pub use rng::{standard_normal, RngStream, StreamBlock};
