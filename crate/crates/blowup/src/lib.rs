//! Construction and verification of concentrating steady states for a
//! mean-field chemotaxis equation with Neumann boundary conditions on
//! planar domains.
//!
//! The pipeline: mesh a domain ([`geometry`]), solve constrained Neumann
//! problems with piecewise-linear finite elements ([`fem`]), tabulate the
//! modified Green function and its regular part ([`green`]), build the
//! multi-bubble approximate solution ([`ansatz`]), locate critical points
//! of the finite-dimensional reduced energy ([`reduced`]), solve the
//! projected correction equation and assemble the solution
//! ([`reduction`]), and run the quantitative verification sweep
//! ([`verify`]).

pub mod ansatz;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod green;
pub mod reduced;

pub use error::{Error, Result};
