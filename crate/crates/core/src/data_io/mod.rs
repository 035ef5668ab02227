//! Images, annotations and the synthetic dataset generator.

pub mod dataset;
pub mod ppm;
pub mod synth;

pub use dataset::{AnnotatedImage, Dataset, GtBox, LoadedImage};
pub use ppm::{load_ppm, save_pgm, save_ppm};
pub use synth::{generate, generate_synthetic, Archetype, ColorMode, SyntheticConfig, SyntheticCorpus};
