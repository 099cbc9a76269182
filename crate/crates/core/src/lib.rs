pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod seqclr;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
