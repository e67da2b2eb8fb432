//! Benchmark and diagnostics harness for the `svdkf` library.
//!
//! Three entry points, mirrored by the CLI subcommands:
//!
//! * [`example1`] — a fully-printed walkthrough of the differentiated
//!   factorization on a 5x2 pre-array family, with a Gram-derivative
//!   residual check;
//! * [`sweep`] — a Monte Carlo parameter-estimation study on the satellite
//!   model across a list of conditioning parameters, comparing the
//!   conventional and factored sensitivity engines;
//! * [`gradcheck`] — analytic likelihood gradients against a central
//!   finite-difference oracle on a configurable model.

pub mod example1;
pub mod gradcheck;
pub mod sweep;
