//! Progressive contrastive learning for dense text retrieval.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod formats;
pub mod loss;
pub mod mining;
pub mod optim;
pub mod sim;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
