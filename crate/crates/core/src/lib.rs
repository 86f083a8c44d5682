pub mod bench;
pub mod error;
pub mod formats;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
