pub mod adapt;
pub mod autodiff;
pub mod buffer;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod norm_stats;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
