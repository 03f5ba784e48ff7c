//! Satellite-codebook localization for nadir UAV imagery.
//!
//! Offline, reference views are rendered on a grid around a planned path,
//! compressed by an encoder and stacked into a [`Codebook`]. Online, a live
//! view is encoded and compared against the codebook columns near a prior
//! pose with an inner-product kernel; the resulting weights give a position,
//! a covariance used for outlier rejection, and (through a rotation sweep) a
//! heading.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

// Validation is written as `!(x > 0.0)` on purpose so that NaN fails it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codebook;
pub mod config;
pub mod embx;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod localizer;
pub mod map_synth;
pub mod pipeline;
pub mod scalar;

pub use codebook::{
    build_codebook, enumerate_grid, BuildOptions, Codebook, GridSpec, PathSpec, Window,
};
pub use embx::{export_embeddings, import_embeddings, EmbxMetadata, EmbxRecords};
pub use encoder::{train_linear_encoder, Encoder, LinearEncoder, LookupEncoder, PcaConfig};
pub use error::{Error, Result};
pub use image::{rotate_image, Image};
pub use localizer::{localize, LocalizationEstimate, LocalizerConfig};
pub use map_synth::{
    generate_map, render_view, CameraSpec, LightingSpec, MapRaster, PlanarPose, SceneParams,
};
pub use scalar::Scalar;

/// Re-exported for building codebooks and encoders from raw matrices.
pub use nalgebra;

/// Double-precision codebook, the default for evaluation and the CLI.
pub type Codebook64 = Codebook<f64>;
/// Single-precision codebook.
pub type Codebook32 = Codebook<f32>;
pub type LinearEncoder64 = LinearEncoder<f64>;
pub type LinearEncoder32 = LinearEncoder<f32>;
pub type LookupEncoder64 = LookupEncoder<f64>;
pub type LookupEncoder32 = LookupEncoder<f32>;
