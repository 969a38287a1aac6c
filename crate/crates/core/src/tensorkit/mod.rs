//! Minimal deterministic reverse-mode numerics kernel: dense tensors, a
//! small op tape sufficient for the feedback network and rate loss, an
//! Adam optimizer, and a finite-difference gradient auditor.

mod adam;
mod gradcheck;
pub mod kernels;
mod tape;
#[cfg(test)]
mod tests;
mod tensor;

pub use adam::{adam_step, AdamState, ParameterSet};
pub use gradcheck::{finite_diff_check, BuildFn, FiniteDiffReport};
pub use tape::{
    invert_dense, quant_index, quant_level, staircase_derivative, staircase_surrogate,
    BnBatchStats, Mode, Tape, ValueId, BN_EPSILON,
};
pub use tensor::Tensor;
