pub mod error;
pub mod imaging;
pub mod pipeline;
pub mod registration;

pub mod calibration;
pub mod config;
pub mod dataset;
pub mod spectral;
pub mod synth;
pub mod training;

pub use error::{Error, Result, Stage};
