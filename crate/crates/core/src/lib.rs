//! LiDAR place recognition for forests from multi-slice BEV density images.
//!
//! The pipeline runs ground removal and terrain normalization
//! ([`preprocess`]), slices the normalized cloud into height bands and
//! rasterizes each into a density image ([`bev`]), encodes every image with
//! a small vision transformer ([`backbone`]), fuses the per-slice tokens
//! with learned per-patch slice weights and pools them into a unit-norm
//! descriptor ([`head`]). Descriptors are trained with a triplet loss
//! ([`trainer`]) on pairs mined by voxel overlap ([`mining`]) and evaluated
//! with exclusion-windowed retrieval ([`eval`]).

pub mod backbone;
pub mod bev;
pub mod cloud;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod graph;
pub mod head;
pub mod mining;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
