pub mod autodiff;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod image;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{Geometry, Patch};
pub use tensor::{Real, Tensor};
