//! Dense tensors, reverse-mode autodiff, Adam and gradient checking.
//!
//! Everything runs in 64-bit floats; see `checkpoint` for the on-disk format.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_tape, GradCheckConfig, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tape::{Gradients, RetrievalTerm, Tape, Var};
pub use tensor::Tensor;
