//! rastertune: config-driven fine-tuning and benchmarking for raster
//! (Earth-observation-style) deep-learning tasks.
//!
//! The toolkit is organized as:
//! - [`registry`]: named component registries (backbones, necks, decoders, heads);
//! - [`backbones`]: desk-scale feature extractors with multi-band, multi-frame
//!   patch embedding and spectral-channel surgery for pretrained weights;
//! - [`necks`] and [`decoders`]: adapters and task-side networks;
//! - [`factory`]: wires backbone -> necks -> decoder -> head from a build spec;
//! - [`data`]: generic raster datasets (folder indexing, grep pairing, band
//!   selection, temporal unstacking, normalization, augmentation);
//! - [`tasks`]: training/validation/test/inference engines per task kind;
//! - [`config`]: the strict run-config schema behind the no-code surface;
//! - [`hpo`]: the `iterate` extension - TPE-based hyperparameter search,
//!   resumable studies, repeated-seed reruns, and reports;
//! - [`cli`]: the command-line entry point.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoders;
pub mod factory;
pub mod fixtures;
pub mod hpo;
pub mod necks;
pub mod registry;
pub mod tasks;
pub mod tensor;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
