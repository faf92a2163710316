//! Training toolkit for comparing standard, adversarial and transfer-learning
//! strategies on small image classification tasks.

pub mod attack;
pub mod datagen;
pub mod error;
pub mod model;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
