//! Data-driven spectral analysis and forecasting for ergodic flows.
//!
//! The pipeline turns a sampled trajectory into a compact, skew-adjoint
//! approximation of the Koopman generator acting on a reproducing kernel
//! Hilbert space:
//!
//! 1. [`dynamics`] generates training and verification trajectories for the
//!    torus rotation, Lorenz 63 and Rössler flows.
//! 2. [`kernel`] builds kNN-sparsified distances, the variable-bandwidth
//!    Gaussian kernel, and its bistochastic Markov normalization.
//! 3. [`basis`] extracts the leading eigenpairs of the Markov operator from a
//!    truncated SVD and evaluates the basis at out-of-sample points.
//! 4. [`generator`] assembles the generator matrix `W`, its eigenfrequencies,
//!    and the frequency-adjusted Dirichlet energies used to rank modes.
//! 5. [`forecast`] projects observables onto the basis and evolves them with
//!    `exp(tW)`.
//!
//! Row-parallel loops use rayon when the `parallel` feature is enabled (the
//! default) and fall back to plain iterators otherwise; results are
//! bitwise identical either way.

pub mod basis;
pub mod dynamics;
mod error;
pub mod forecast;
pub mod generator;
pub mod kernel;
pub mod linalg;
pub mod par;
pub mod sparse;

pub use error::{Error, Result};

pub use nalgebra::{Complex, DMatrix, DVector};

/// Complex scalar used for eigenvectors and predictions.
pub type C64 = Complex<f64>;
