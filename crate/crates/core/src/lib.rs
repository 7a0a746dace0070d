//! Triplet-attention multiple-choice visual question answering.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod session;
pub mod tagger;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;
pub mod vision;

pub use attention::AttentionMode;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelParams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
