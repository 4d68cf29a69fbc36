// negated float comparisons are deliberate: `!(x > 0.0)` rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Sequential data assimilation for chaotic ODEs built on Lyapunov analysis
//! of the tangent space.
//!
//! The library computes Lyapunov spectra and an orthonormal basis of the
//! non-stable tangent subspace by a continuous-QR flow, checks detectability
//! of an observation operator against that subspace, synthesizes an observer
//! gain that penalizes only the non-stable directions, and runs twin
//! experiments (Lorenz '96, discretized Burgers) against an extended
//! Kalman-Bucy baseline.

pub mod detect;
pub mod error;
pub mod filter;
pub mod linalg;
pub mod lyapunov;
pub mod models;
pub mod ode;
pub mod report;
pub mod seeds;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector};
