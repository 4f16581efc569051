//! Cross-domain continual learning for WiFi CSI activity recognition.

pub mod autodiff;
pub mod checks;
pub mod coreset;
pub mod csi_sim;
pub mod error;
pub mod harness;
pub mod model;
pub mod preprocess;
pub mod seed;
pub mod storage;
pub mod train;

pub use error::{Error, Result};
