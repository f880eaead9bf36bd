//! Dense tensors and the reverse-mode tape every model op is recorded on.

mod gemm;
mod ops;
mod optim;
mod tape;
mod value;

pub(crate) use gemm::{gemm, Mat};
pub(crate) use value::split_axis;

pub(crate) use optim::momentum_update;
pub use optim::sgd_step;
pub use tape::{Backward, GradCtx, Tape, Var};
pub use value::{Tensor, MAX_RANK};
