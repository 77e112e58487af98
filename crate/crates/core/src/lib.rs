pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod text;
pub mod encoder;
pub mod probe;
pub mod selfguide;
pub mod losses;
pub mod evalsuite;
pub mod trainer;
pub mod cli;
