pub mod attention;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod fusion;
pub mod io;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vjp;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
