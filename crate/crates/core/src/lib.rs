//! Gated linear attention sequence modeling at desk scale.

pub mod attention;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ist;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, StateBundle};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use tokenizer::{BpeVocab, TokenSequence};
