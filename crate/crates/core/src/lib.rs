//! Vine disease detection from UAV multispectral imagery.
//!
//! The crate covers the whole chain:
//!
//! 1. [`registration`] aligns the infrared image onto the visible one.
//! 2. [`depthmap`] turns a digital surface model into a binary vine mask.
//! 3. [`dataset`] cuts and augments 256×256 training patches.
//! 4. [`neuralnet`] is a small reverse-mode autodiff engine.
//! 5. [`vddnet`] builds the three-encoder segmentation network, trains it and
//!    segments full orthophotos.
//! 6. [`evaluation`] scores a label map at grapevine scale.
//!
//! [`synthvine`] generates co-registered synthetic vineyard scenes with
//! ground truth, and [`raster`] holds the shared raster type and file format.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod raster;
pub mod registration;
pub mod depthmap;
pub mod neuralnet;
pub mod dataset;
pub mod vddnet;
pub mod evaluation;
pub mod synthvine;
