pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod impute;
pub mod io;
pub mod metrics;
pub mod missingness;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
