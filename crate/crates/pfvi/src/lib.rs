//! Variational inference for high-dimensional generalized linear mixed
//! models with fully, partially and unfactorized coordinate-ascent
//! families, plus the accuracy metrics and spectral design diagnostics
//! that go with them.
//!
//! The crate's primary interface is the library (see `examples/` for one
//! runnable program per capability); a thin `pfvi` binary exposes the same
//! operations as subcommands.

pub mod bounds;
pub mod cavi;
pub mod cli;
pub mod design;
pub mod error;
pub mod gibbs;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod rs_lab;
pub mod sim;
pub mod surrogate;
pub mod uqf;

pub use error::{Error, Result};
