pub mod cli;
pub mod constraints;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod sampler;
pub mod schedule;
pub mod temporal;
pub mod video;

pub use error::{Error, Result};
