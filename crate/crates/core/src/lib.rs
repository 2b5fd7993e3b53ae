pub mod autograd;
mod codec;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod sequence_encoder;
pub mod synth;
pub mod session_encoder;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, ReduceMode, Var};
pub use error::{Error, Result};
pub use params::{Gradients, ParamGrad, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
