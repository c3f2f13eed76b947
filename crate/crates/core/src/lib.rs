pub mod backbone;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod fusion;
pub mod gradcam;
pub mod harness;
pub mod hfe;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ori;
pub mod seed;
pub mod synth;

pub use error::{MoonError, Result};
