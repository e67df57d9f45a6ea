pub mod baseline;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{DataError, Error, Result, TensorError};
