pub mod acquisition;
pub mod baseline;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod mssmn;
pub mod numerics;
pub mod phantom;
pub mod training;

mod fft;
mod scale;

pub use error::{Error, Result};
