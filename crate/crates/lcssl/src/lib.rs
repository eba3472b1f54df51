//! Desk-scale self-supervised pretraining with BYOL plus a pixel-level
//! local contrastive loss.
//!
//! Two views of every image are produced: a color-only view and a
//! spatial+color view. Because the augmentation pipeline records exact
//! forward/inverse coordinate maps, ground-truth pixel correspondences
//! between the two views are known analytically. The local loss is a
//! temperature softmax cross-entropy over within-image feature locations,
//! evaluated at continuous target coordinates by bilinearly warping the
//! negative log-likelihood map. The global loss is the usual BYOL
//! normalized-MSE between prediction and (stop-gradient) target projection.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `lcssl` binary for the command-line surface.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod image;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use augment::{AugConfig, ColorOp, TransformKind, TransformSpec};
pub use error::{Error, Result};
pub use geometry::{CorrespondenceSet, FeatureGeometry};
pub use image::Image;
pub use losses::{LocalVariant, LossBreakdown, LossConfig};
pub use model::{ModelConfig, ModelPair, NormMode};
pub use tensor::Tensor;
pub use trainer::TrainConfig;

/// Floating point scalar the numerics core is generic over.
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
