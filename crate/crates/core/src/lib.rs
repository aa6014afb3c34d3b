pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod heads;
pub mod matrix;
pub mod nn;
pub mod params;
pub mod rng;
pub mod ssl;

pub use error::{GaitError, Result};
