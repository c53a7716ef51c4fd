pub mod cli;
pub mod codec;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod kg;
pub mod numerics;
pub mod qa;
pub mod sampler;
pub mod toy;

pub use error::{Error, Result};
