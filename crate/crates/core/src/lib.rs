pub mod decoder;
pub mod diffcore;
pub mod discriminator;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod sampler;
pub mod skeleton;

pub use error::{Error, Result};
