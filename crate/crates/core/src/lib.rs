pub mod error;
pub mod grid;
pub mod harness;
pub mod measures;
pub mod model;
pub mod quad;
pub mod rate;
pub mod simulate;
pub mod tilt;
pub mod waits;

pub use error::{Error, Result};
