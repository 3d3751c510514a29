pub mod autograd;
pub mod backbone;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mmi;
pub mod nn;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
