//! Procedural generation of a desk-scale relational QA dataset: scenes of
//! six uniquely colored shapes on a mid-gray canvas, template questions with
//! analytically computed answers, a bit-exact binary container, external
//! feature-map ingestion, and image normalization.

pub mod dataset;
pub mod featmap;
pub mod normalize;
pub mod qa;
pub mod scene;
pub mod vocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("generation failed: {0}")]
    Generation(String),
}

impl DataError {
    pub fn format(offset: usize, detail: impl Into<String>) -> Self {
        DataError::Format {
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<V> = std::result::Result<V, DataError>;

pub use dataset::{generate, Dataset, Sample};
pub use qa::{make_qa, Qa, QuestionFamily};
pub use scene::{generate_scene, render, Scene, SceneObject, Shape};
