//! End-to-end optimization of the attention models on the synthetic dataset:
//! flat-text run configuration, model assembly, cross-entropy loss, Adam,
//! a deterministic training loop with CSV metrics, per-family evaluation,
//! and bit-exact checkpointing.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error at line {line}, column {column}: {detail}")]
    ConfigParse {
        line: usize,
        column: usize,
        detail: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("non-finite gradient in {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error(transparent)]
    Tensor(#[from] hvqa_core::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] hvqa_data::DataError),
}

pub type Result<V> = std::result::Result<V, TrainError>;

pub use config::RunConfig;
pub use eval::{evaluate, EvalReport};
pub use model::VqaModel;
pub use run::{train_full, StopReason, TrainOutcome, Trainer};
