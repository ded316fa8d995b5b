pub mod data;
pub mod kg;
pub mod kv;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

/// Double-precision model, the default for training and evaluation.
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
