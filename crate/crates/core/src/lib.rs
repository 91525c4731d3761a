pub mod data;
pub mod cli;
pub mod error;
pub mod infer;
pub mod net;
pub mod rng;
pub mod simgen;
pub mod train;

pub use error::{NnmrError, Result};
