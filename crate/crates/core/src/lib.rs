//! CogRNN: a scale-invariant Laplace-domain temporal memory and the small
//! actor-critic agents and timing tasks used to evaluate it.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod env;
pub mod error;
pub mod experiment;
pub mod laplace;
pub mod nets;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
