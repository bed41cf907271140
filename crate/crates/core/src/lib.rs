//! Data-driven estimation of additive model error for the multi-scale
//! Lorenz 96 system, with ensemble assimilation and probabilistic
//! verification.

pub mod density;
pub mod error;
pub mod estimation;
pub mod etkf;
pub mod experiment;
pub mod io;
pub mod l96;
pub mod lm;
pub mod model;
pub mod observation;
pub mod rk4;
pub mod rng;
pub mod verification;

pub use error::{Error, Result};
