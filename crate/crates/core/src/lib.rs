//! Blind face restoration guided by multi-scale deep component dictionaries.

pub mod config;
pub mod dataset;
pub mod degradation;
pub mod dft;
pub mod dictionary;
pub mod error;
pub mod features;
pub mod harness;
pub mod imaging;
pub mod landmarks;
pub mod nn;
pub mod objectives;
pub mod restorer;
pub mod synth;

pub use error::{Error, Result};
