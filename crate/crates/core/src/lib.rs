//! Dense tensors with reverse-mode automatic differentiation, plus the
//! attention and aggregation building blocks of an L2-norm hard-attention
//! question-answering model.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — plain dense n-d arrays and shape checking
//! * [`kernels`] — compute kernels with a data-parallel path behind the
//!   `parallel` feature and a sequential fallback; both produce bit-identical
//!   results because every reduction runs in a fixed order
//! * [`tape`] — the Wengert tape: op recording and the backward pass
//! * [`nn`] — parameterized layers (linear, conv, batch norm, LSTM, MLP)
//! * [`attention`] — multimodal fusion, presence, fixed-k / adaptive /
//!   soft / straight-through selection
//! * [`aggregate`] — sum pooling, non-local pairwise operator, relation
//!   aggregation, and their FLOP models
//! * [`gradcheck`] — central finite-difference checking utilities

pub mod aggregate;
pub mod attention;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
