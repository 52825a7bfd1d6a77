pub mod cells;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gumbel;
pub mod model;
pub mod ndgrad;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
