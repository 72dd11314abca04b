//! Anisotropic proximal mappings and envelopes built from Legendre
//! potentials, with the splitting solvers that use them.
//!
//! For a penalty `phi` (see [`potentials`]) and `lambda > 0` the envelope of
//! `f` is
//!
//! ```text
//! e(v) = inf_z  f(z) + (1/lambda) phi(v - z)
//! ```
//!
//! and its argmin set is the proximal mapping. Where the prox is locally
//! unique the envelope is differentiable with gradient
//! `(1/lambda) grad phi(v - z)`. The crate provides:
//!
//! - [`potentials`]: the quad / cubic / tan / tan-sep / log / log-sep
//!   potentials, separable and layer-scaled composites, Bregman distances,
//!   gradient inversion and admissibility checks;
//! - [`models`]: nonconvex test functions, a small MLP with manual
//!   backpropagation, synthetic datasets and sharding;
//! - [`oracle`]: finite differences and dense-grid global minimization used
//!   to verify everything else;
//! - [`prox`]: grid and local prox solvers, envelope gradients, the
//!   stationarity measure and prox-boundedness evidence;
//! - [`splitting`]: the penalized splitting objective, its stationarity
//!   residuals and line-searched alternating minimization;
//! - [`distributed`]: simulated synchronous consensus training with
//!   momentum workers (EASGD when the potential is quadratic);
//! - [`harness`]: config parsing and the `aniso` experiment front end.
//!
//! Runnable walkthroughs live in `examples/`; see the README for the list.

pub mod distributed;
pub mod error;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod potentials;
pub mod prox;
pub mod record;
pub mod splitting;

pub use error::{Error, Result};

/// Dense column vector used throughout.
pub type Vector = nalgebra::DVector<f64>;
