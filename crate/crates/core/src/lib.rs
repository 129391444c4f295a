pub mod autoencoder;
pub mod error;
pub mod flow;
pub mod harness;
pub mod midi;
pub mod numerics;
pub mod policy;
pub mod signal;
pub mod sims;

pub use error::{Error, Result};
