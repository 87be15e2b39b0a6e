//! Dense-tensor math with reverse-mode differentiation: tensors, the numeric
//! kernels, the recording tape, the dual-mode [`Engine`], and the
//! finite-difference gradient oracle.

pub mod engine;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use engine::{CustomOp, Engine, EvalEngine, TapeEngine};
pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use ops::{log_sum_exp, lse2, lse3, softmax, layer_norm, AttnMask};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
