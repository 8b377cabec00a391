//! Corrector machinery for parabolic homogenization with space-time
//! periodic coefficients: cell correctors, the homogenized matrix, dual
//! (flux) correctors, parabolic smoothing operators, two-scale expansions,
//! and an epsilon-ladder convergence-study harness.
//!
//! The `parallel` feature (on by default) runs the data-parallel inner loops
//! on rayon; disabling it yields a fully sequential build with bitwise
//! identical results.

pub mod cell;
pub mod coeff;
pub mod dual;
pub mod error;
pub mod fft;
pub mod smooth;
pub mod solver;
mod krylov;
pub mod par;
pub mod torus;
pub mod twoscale;

pub use error::{Error, Result};
