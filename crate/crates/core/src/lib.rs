//! Proposal-free object localization: a convolutional backbone runs once per
//! pyramid level, every 4x4 to 6x6 window of the resulting feature map is
//! classified by an expert unit for its shape, and the window scores are
//! merged into per-pixel score maps.

pub mod backbone;
pub mod bbox;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluate;
pub mod experts;
pub mod model;
pub mod pyramid;
pub mod rng;
pub mod scanner;
pub mod scoremap;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
