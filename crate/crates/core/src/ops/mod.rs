//! Forward and backward kernels.

pub mod batchnorm;
pub mod conv;
pub mod layers;

pub use batchnorm::{
    batch_stats, bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_backward_normalized,
    bn_train_forward, ema_update, BatchStats, BnGrads, BnParams, BnTrainOutput, DEFAULT_EPS,
    DEFAULT_MOMENTUM,
};
pub use conv::{
    conv2d, conv2d_backward, conv2d_forward, conv2d_grads, rotate_kernel, scale_out_channels,
    ConvGeometry, ConvGrads, ConvParams,
};
pub use layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, softmax_xent, LinearGrads,
};
