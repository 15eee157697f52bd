//! Desk-scale scene-text swapping.
//!
//! Replaces the text in a 64×256 word image while keeping the original fonts,
//! colors, geometry and background. The pipeline has three generative stages:
//!
//! 1. **Text swap** — a style image and a plainly rendered content image are
//!    encoded separately, fused by self-attention, and decoded into a
//!    foreground image of the new text in the old style. A fiducial-point
//!    predictor plus thin-plate-spline warp (the content shape transform)
//!    bends the content image onto the style image's shape first.
//! 2. **Background completion** — an inpainting network erases the original
//!    text strokes and reconstructs a text-free background.
//! 3. **Fusion** — foreground and background decoder features are merged into
//!    the final word image.
//!
//! Supporting modules: [`dataforge`] generates paired synthetic training data
//! from stroke fonts and background textures, [`trainer`] runs adversarial
//! training with checkpointing, [`metrics`] scores outputs (l2 / PSNR / SSIM),
//! and [`tensor`] is the small autodiff engine everything is built on.

pub mod tensor;
pub mod geometry;
pub mod img;
pub mod render;
pub mod dataforge;
pub mod nets;
pub mod losses;
pub mod trainer;
pub mod metrics;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported glyph {glyph:?} in font {font}")]
    UnsupportedGlyph { glyph: char, font: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("failed to load sample {id}: {reason}")]
    SampleLoad { id: String, reason: String },
    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
    pub(crate) fn image(context: impl Into<String>, source: image::ImageError) -> Self {
        Error::Image { context: context.into(), source }
    }
    pub(crate) fn io_path(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { context: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Root directory of the bundled demo assets (stroke fonts and backgrounds),
/// resolved relative to this crate. Useful from tests and examples; the CLI
/// takes explicit paths.
pub fn bundled_assets_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}
