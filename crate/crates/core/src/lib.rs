//! Desk-scale reference implementation of a hybrid sparse-attention stack:
//! sparse-state-expansion linear attention, block-sparse softmax attention,
//! the layer plan that mixes them, INT8 spiking and FP8 quantization paths,
//! distillation losses and an analytical long-context cost model.

pub mod attention;
pub mod error;
pub mod fixtures;
pub mod hybrid;
pub mod io;
pub mod losses;
pub mod moba;
pub mod perf;
pub mod quant;
pub mod sse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
