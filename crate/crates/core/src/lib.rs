pub mod data;
pub mod engine;
pub mod hypernet;
pub mod error;
pub mod federation;
pub mod lrf;
pub mod metrics;
pub mod multiexit;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{LayerId, ParamSet, Precision, Role, Scope};
pub use tensor::Tensor;
