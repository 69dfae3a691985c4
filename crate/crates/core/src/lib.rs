pub mod agreement;
pub mod cli;
pub mod corpus;
pub mod demo;
pub mod error;
pub mod eval;
pub mod instances;
pub mod model;
pub mod taxonomy;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
