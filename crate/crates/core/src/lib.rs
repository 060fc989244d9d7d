pub mod ablate;
pub mod codec;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prob;
pub mod train;

pub use error::{QarvError, Result};
