pub mod autodiff;
mod error;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
