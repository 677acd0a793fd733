//! Low-bit activation coding paths: INT8 with bitwise spike expansion, and
//! FP8 E4M3 emulation.

pub mod container;
pub mod fp8;
pub mod int8;
pub mod spike;

pub use fp8::{fp8_decode, fp8_encode, fp8_matmul_emulated, fp8_quantize, Fp8Tensor};
pub use int8::{
    quantize_activation_groups, quantize_weight_blocks, QuantizedBlockMatrix,
    QuantizedGroupActivation, DEFAULT_CLIP_GRID,
};
pub use spike::{
    firing_rate, spike_decode, spike_encode, spike_matmul, FiringRate, OpCountReport, SpikeTrain,
};
