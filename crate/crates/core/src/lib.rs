//! Compositional action recognition with conditional probability
//! composition (C2C): split construction, model, training and evaluation.

pub mod error;
pub mod evaluation;
pub mod io;
pub mod labelspace;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
