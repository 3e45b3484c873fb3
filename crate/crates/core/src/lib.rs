pub mod arrayfile;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod mpm;
mod parallel;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
