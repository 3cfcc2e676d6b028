//! Tensor semantics, the reverse-mode gradient tape, the optimizer and
//! learning-rate schedule, and the finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod params;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;


pub use gradcheck::{grad_check, GradCheckReport, GradCheckRow};
pub use optim::{AdamW, LrSchedule};
pub use params::{Init, ParamGroup, ParamStore};
pub use scalar::Scalar;
pub use tape::{OpBackward, Tape, ValueId};
pub use tensor::Tensor;
