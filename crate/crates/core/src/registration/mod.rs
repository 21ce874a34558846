//! Multispectral image registration.
//!
//! The moving image (infrared camera) is aligned onto the reference (visible
//! camera) by keypoint matching, a RANSAC homography and an iterative
//! RMSE-reduction loop. Homographies map moving-image pixel coordinates to
//! reference pixel coordinates.

mod detect;
mod homography;
mod warp;

pub use detect::{detect_keypoints, DetectorParams, DESCRIPTOR_LEN};
pub use homography::{
    apply_h, correspondences, dlt, estimate_homography, estimate_homography_points, refine_iteratively, rmse,
    Correspondence, Homography, Point2, RansacParams, RefineParams, Refinement,
};
pub use warp::{chessboard_composite, warp};

use thiserror::Error;

use crate::raster::{MultiRaster, RasterError};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("image too small for detection: {width}x{height} (min 32)")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("detector expects a single-channel image, got {0} channels")]
    NotSingleChannel(usize),
    #[error("too few matches: {found} (need {required})")]
    TooFewMatches { found: usize, required: usize },
    #[error("degenerate configuration: every sample was collinear")]
    DegenerateConfiguration,
    #[error("no consensus: {inliers} inliers (need {required})")]
    NoConsensus { inliers: usize, required: usize },
    #[error("homography is singular")]
    SingularHomography,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub orientation: f32,
    pub response: f32,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query_idx: usize,
    pub train_idx: usize,
    pub distance: f32,
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each descriptor, the nearest and second-nearest squared distances
/// into `set`, with the nearest index.
fn two_nearest(q: &[f32], set: &[Keypoint]) -> (usize, f32, f32) {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (j, k) in set.iter().enumerate() {
        let d = dist2(q, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

/// Nearest-neighbour matching with Lowe's ratio test and a mutual
/// cross-check.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], ratio: f32) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let back: Vec<usize> = b.iter().map(|k| two_nearest(&k.descriptor, a).0).collect();
    let mut out = Vec::new();
    for (i, k) in a.iter().enumerate() {
        let (j, d1, d2) = two_nearest(&k.descriptor, b);
        let (d1, d2) = (d1.sqrt(), d2.sqrt());
        // a lone candidate has no second neighbour to compare against
        let passes = d2.is_infinite() || d1 < ratio * d2;
        if passes && back[j] == i {
            out.push(Match { query_idx: i, train_idx: j, distance: d1 });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationParams {
    pub detector: DetectorParams,
    pub ratio: f32,
    pub ransac: RansacParams,
    pub refine: RefineParams,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            ratio: 0.8,
            ransac: RansacParams::default(),
            refine: RefineParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    /// Maps moving-image coordinates onto the reference.
    pub homography: Homography,
    pub rmse_history: Vec<f64>,
    pub moving_keypoints: usize,
    pub reference_keypoints: usize,
    pub matches: usize,
}

/// Full chain on two single-channel images: detect, match, RANSAC, refine.
pub fn register_images(
    reference: &MultiRaster,
    moving: &MultiRaster,
    params: &RegistrationParams,
) -> Result<RegistrationOutcome> {
    let kr = detect_keypoints(reference, &params.detector)?;
    let km = detect_keypoints(moving, &params.detector)?;
    let matches = match_descriptors(&km, &kr, params.ratio);
    let pairs = correspondences(&matches, &km, &kr);
    let h0 = estimate_homography_points(&pairs, &params.ransac)?;
    let refine = RefineParams { initial_threshold: params.ransac.threshold, ..params.refine };
    let refined = refine_iteratively(&h0, &pairs, &refine)?;
    Ok(RegistrationOutcome {
        homography: refined.homography,
        rmse_history: refined.rmse_history,
        moving_keypoints: km.len(),
        reference_keypoints: kr.len(),
        matches: matches.len(),
    })
}
