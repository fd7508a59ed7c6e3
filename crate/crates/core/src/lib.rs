pub mod bfp;
pub mod boxes;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fom;
pub mod layers;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
