//! Tiled whole-brain segmentation machinery.
//!
//! A scan is affinely registered to a canonical template, its intensities are
//! harmonised by robust regression of sorted masked intensities, the canonical
//! grid is split into overlapping tiles that are segmented independently, and
//! the tile outputs are fused by majority vote and mapped back to the scan.

pub mod atlas_select;
pub mod error;
pub mod fusion;
pub mod harmonize;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod segmenter;
pub mod tiling;
pub mod volume;

pub use error::{Error, Result};
