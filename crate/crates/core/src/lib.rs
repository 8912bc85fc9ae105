pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod msda;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
