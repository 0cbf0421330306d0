//! Numerical laboratory for one-dimensional SPDEs driven by space-time white noise.
//!
//! The crate covers the stochastic heat equation on `[0,1]` with Dirichlet or
//! Neumann boundary conditions and the fourth-order (linearized Cahn–Hilliard)
//! equation with Neumann-type boundary conditions:
//!
//! ```text
//! du = (-kappa u_xxxx + rho u_xx + b(u)) dt + sigma(u) dW
//! ```
//!
//! Modules, bottom-up:
//!
//! * [`kernels`]: series and image evaluation of the Green's functions, and
//!   ratio verifiers for their Gaussian, L² and increment estimates.
//! * [`noise`]: counter-based, addressable space-time white noise.
//! * [`solver`]: spectral exponential Euler and finite-difference IMEX schemes.
//! * [`malliavin`]: derivative of the scheme with respect to noise increments,
//!   the energy field `gamma(t,x)` and moment envelopes.
//! * [`analysis`]: supremum laws, density estimates, Hölder regressions,
//!   small-ball tails, escape probabilities.

pub mod analysis;
pub mod ensemble;
mod error;
pub mod kernels;
pub mod malliavin;
pub mod noise;
pub mod quad;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
