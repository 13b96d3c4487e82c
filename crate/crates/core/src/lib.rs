pub mod attention;
pub mod cli;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod masks;
pub mod numerics;
pub mod verify;

pub use error::{Error, Result};
