pub mod engine;
pub mod error;
pub mod eval;
pub mod focuser;
pub mod losses;
pub mod model;
pub mod nn;
pub mod part_attention;
pub mod synthetic_data;

pub use error::{Error, Result};
