//! Federated pre-training and fine-tuning of a small BERT-style encoder
//! across simulated data silos.

pub mod attention;
pub mod data;
pub mod error;
pub mod fed;
pub mod model;
pub mod ner;
pub mod runner;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
