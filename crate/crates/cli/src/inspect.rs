//! Human-readable summaries of VDDR and VDDW files.

use std::fmt::Write as _;
use std::path::Path;

use vdd_core::neuralnet::{decode_checkpoint, CHECKPOINT_MAGIC};
use vdd_core::raster::{decode_raster, MultiRaster};

use crate::{CliError, StageExt};

pub fn describe_raster(r: &MultiRaster) -> String {
    let roles: Vec<String> = r.roles().iter().map(|x| x.to_string()).collect();
    let mut s = format!("{}×{}×{}, roles {}\n", r.width(), r.height(), r.channels(), roles.join(","));
    if let Some(g) = r.georef() {
        let _ = writeln!(s, "georef origin ({}, {}) pixel {}", g.origin_x, g.origin_y, g.pixel_size);
    }
    let c = r.channels();
    for (i, role) in roles.iter().enumerate() {
        let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for v in r.data().iter().skip(i).step_by(c) {
            lo = lo.min(*v);
            hi = hi.max(*v);
            sum += *v as f64;
        }
        let mean = sum / r.pixel_count().max(1) as f64;
        let _ = writeln!(s, "  {role}: min {lo} max {hi} mean {mean:.4}");
    }
    s
}

pub fn describe_checkpoint(tensors: &[(String, vdd_core::neuralnet::Tensor<f32>)]) -> String {
    let total: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut s = format!("{} tensors, {} values\n", tensors.len(), total);
    let width = tensors.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    for (name, t) in tensors {
        let _ = writeln!(s, "  {name:width$}  {:?}", t.shape());
    }
    s
}

/// Dispatches on the magic bytes; anything that is not a checkpoint is
/// decoded as a raster so format errors surface as raster errors.
pub fn inspect_bytes(bytes: &[u8]) -> Result<String, CliError> {
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let t = decode_checkpoint(bytes).stage("inspect")?;
        return Ok(describe_checkpoint(&t));
    }
    let r = decode_raster(bytes).stage("inspect")?;
    Ok(describe_raster(&r))
}

pub fn inspect(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::stage("inspect", format!("{}: {e}", path.display())))?;
    inspect_bytes(&bytes)
}
