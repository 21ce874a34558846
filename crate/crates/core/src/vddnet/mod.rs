//! The three-encoder segmentation network, its single-trunk baseline,
//! training and full-orthophoto segmentation.

mod network;
mod segment;
mod train;

pub use network::{build_baseline, build_vddnet, Arch, Inputs, Network, VddNetSpec};
pub use segment::{
    class_of_color, render_disease_map, segment_orthophoto, SegmentationResult, DEFAULT_TILE, PALETTE,
};
pub use train::{batch_inputs, history_csv, train, HistoryRow, TrainConfig, TrainOutcome};

use std::path::PathBuf;

use thiserror::Error;

use crate::neuralnet::NnError;
use crate::raster::RasterError;

#[derive(Debug, Error)]
pub enum VddNetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("loss became non-finite at iteration {iteration}{}", .dump.as_ref().map(|p| format!(" (state dumped to {})", p.display())).unwrap_or_default())]
    DivergedLoss { iteration: usize, dump: Option<PathBuf> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("raster {width}x{height} is smaller than the {tile}px tile")]
    TooSmall { width: u32, height: u32, tile: u32 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, VddNetError>;
