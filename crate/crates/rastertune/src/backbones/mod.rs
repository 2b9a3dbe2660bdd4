//! Desk-scale feature extractors: a mini vision transformer with multi-band,
//! multi-frame patch embedding, and a 4-stage convolutional pyramid.

use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};

mod conv;
mod remap;
mod vit;

pub use conv::{build_conv_pyramid, ConvPyramid, ConvPyramidConfig};
pub use remap::{remap_patch_embedding, RemapError};
pub use vit::{build_toyvit, ToyViT, ToyViTConfig};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl From<TensorError> for BackboneError {
    fn from(e: TensorError) -> Self {
        BackboneError::ShapeMismatch(e.to_string())
    }
}

/// Form of one intermediate output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapForm {
    /// (B, N_tokens, d) with N_tokens = frames * grid.0 * grid.1.
    Tokens { frames: usize, grid: (usize, usize) },
    /// (B, C, H, W).
    Grid,
}

impl MapForm {
    pub fn is_grid(&self) -> bool {
        matches!(self, MapForm::Grid)
    }
}

/// One intermediate backbone output on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub form: MapForm,
}

/// Ordered intermediate outputs flowing backbone -> necks -> decoder.
#[derive(Debug, Clone, Default)]
pub struct FeatureMapSet {
    pub items: Vec<FeatureMap>,
}

impl FeatureMapSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Static (input-size independent) description of one output item, used by
/// the factory to plan neck/decoder construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub form: MapForm,
    pub channels: usize,
}

pub trait Backbone {
    /// `x` has shape (B, T, C, H, W).
    fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<FeatureMapSet, BackboneError>;

    /// Per-item output description, in forward order.
    fn out_meta(&self) -> Vec<ItemMeta>;

    fn bands(&self) -> &[String];

    fn num_frames(&self) -> usize;

    /// Fixed input side length, if the architecture demands one.
    fn fixed_input_size(&self) -> Option<usize>;

    /// Input side lengths must be divisible by this.
    fn input_divisor(&self) -> usize;
}
