//! SVD-factorized Kalman filtering with analytic filter sensitivities and
//! maximum-likelihood parameter estimation.
//!
//! The crate is organized around four layers:
//!
//! * [`svd_diff`] — factorization of tall pre-arrays `A = W [S; 0] V^T` and
//!   propagation of parameter derivatives through the factorization, the
//!   matrix-calculus primitive everything else builds on;
//! * [`model`] — parametrized linear-Gaussian state-space models: generator
//!   evaluation, covariance factor initialization with derivatives,
//!   trajectory simulation, and a built-in satellite tracking model;
//! * [`filters`] — four filter engines over one model/trajectory pair: the
//!   conventional covariance filter, its direct sensitivity extension, the
//!   SVD-factorized filter, and the SVD-factorized sensitivity filter;
//! * [`estimation`] — the negative log-likelihood in factored variables, its
//!   analytic gradient, finite-difference audit oracles, and a BFGS
//!   maximum-likelihood estimator.
//!
//! Covariances are carried as `{Q, D^{1/2}}` factor pairs with
//! `P = Q D Q^T`; the factored recursions never subtract Gram matrices, which
//! is what keeps them usable on ill-conditioned problems where the
//! conventional recursion loses positive semi-definiteness to roundoff.

pub mod error;
pub mod estimation;
pub mod filters;
pub(crate) mod linalg;
pub mod model;
pub mod svd_diff;
pub mod testing;

pub use error::{Error, PreArrayKind, Result};
pub use svd_diff::SvdFactors;
