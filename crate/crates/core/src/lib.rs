pub mod atm;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flops;
pub mod labels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod shrunk;
pub mod train;

pub use error::{Error, Result};
