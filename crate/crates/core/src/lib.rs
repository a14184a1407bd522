pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod parse;
pub mod raster;
pub mod scenes;
pub mod serialize;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
