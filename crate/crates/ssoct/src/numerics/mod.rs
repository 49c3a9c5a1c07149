//! Minimal differentiable tensor engine.
//!
//! Covers exactly the operator set the reconstruction network needs:
//! conv2d, depthwise conv2d, dense, relu/sigmoid, global average pooling,
//! broadcast add/mul, L1 loss, reshape/crop, and the per-pixel
//! predicted-kernel feature mapping. Gradients come from a linear tape
//! replayed in reverse; `finite_difference_check` is the independent
//! oracle used to validate every backward path.

mod gradcheck;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use kernels::MapGeometry;
pub use param::{ParamBlock, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
