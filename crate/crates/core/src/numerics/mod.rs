//! Dense tensors, reverse-mode gradients, and the finite-difference oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, FdOptions, FdReport};
pub use kernels::{conv2d, crop_and_resize, gap, softmax_cross_entropy, Padding, RoiBox};
pub use params::{sgd_step, ParamSet, SgdConfig};
pub use tape::{soft_plus_ratio, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
