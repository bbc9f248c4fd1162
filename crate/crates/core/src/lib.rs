pub mod autodiff;
pub mod checkpoint;
pub mod classify;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nets;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
