pub mod cli;
pub mod corpus;
pub mod denoise;
pub mod distill;
pub mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
