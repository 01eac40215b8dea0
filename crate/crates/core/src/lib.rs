//! Generalization error of pretraining followed by fine-tuning in diagonal
//! linear networks.

pub mod diagnet;
pub mod error;
pub mod experiment;
pub mod penalty;
pub mod prox;
pub mod replica;
pub mod ridge;
pub mod rng;
pub mod task;

pub use error::{Error, Result};
