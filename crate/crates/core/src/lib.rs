//! Random-transform purification with adversarially fine-tuned purifiers,
//! plus the adaptive attacks and evaluation used to measure it.

pub mod attacks;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use rng::SeededRng;
