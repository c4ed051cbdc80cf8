pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod skeleton;
pub mod train;

pub use error::{Result, ScdError};
