//! Dense tensors with reverse-mode differentiation: the arithmetic layer the
//! segmentation model, its losses and the gradient checks are written in.

use std::sync::atomic::{AtomicBool, Ordering};

pub mod checkpoint;
pub mod checks;
mod error;
mod float;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use gradcheck::{gradient_check, gradient_check_many, CoordSample};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Forces reductions that could otherwise run in parallel into a fixed
/// sequential order.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::SeqCst)
}
