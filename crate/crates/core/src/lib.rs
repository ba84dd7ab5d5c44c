pub mod agent;
pub mod analysis;
pub mod attention;
pub mod environment;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{GradTape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type GradTape32<'a> = GradTape<'a, f32>;
pub type GradTape64<'a> = GradTape<'a, f64>;
