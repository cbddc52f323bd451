pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod nn;
pub mod os_loss;
pub mod train;

pub use error::{Error, Result};
