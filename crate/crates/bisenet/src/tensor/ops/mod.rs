//! Neural-network primitive kernels: forward and reverse-mode backward pairs.
//!
//! All reductions accumulate in `f64` regardless of the element type, so the
//! `f32` and `f64` instantiations of a kernel stay within casting distance of
//! each other.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_backward, conv_out_dim, ConvSpec};
pub use elementwise::{
    add, add_backward, concat_backward, concat_channels, mul, mul_backward, relu, relu_backward,
    sigmoid, sigmoid_backward,
};
pub use norm::{
    batchnorm2d_eval, batchnorm2d_eval_backward, batchnorm2d_train, batchnorm2d_train_backward,
    update_running_stats, BnBatchStats,
};
pub use pool::{
    avgpool2d, avgpool2d_backward, global_avgpool, global_avgpool_backward, maxpool2d,
    maxpool2d_backward, PoolSpec,
};
pub use resize::{resize_bilinear, upsample_bilinear, upsample_bilinear_backward};
