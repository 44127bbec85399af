//! Forward and backward kernels for the layer set used by ResNet18.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu_forward, softmax};
pub use batchnorm::{batchnorm_eval, batchnorm_train, BatchNormParams, BatchStats};
pub use conv::{conv2d_forward, conv_out_dim, ConvParams};
pub use linear::linear_forward;
pub use loss::weighted_cross_entropy;
pub use pool::{global_avgpool_forward, maxpool2d_forward};
