use super::network::{Inputs, Network};
use super::{Result, VddNetError};
use crate::dataset::ClassId;
use crate::neuralnet::Tensor;
use crate::raster::{mirror_index, ChannelRole, MultiRaster};

pub const DEFAULT_TILE: u32 = 256;

/// Display colour per class, indexed by [`ClassId`].
pub const PALETTE: [[u8; 3]; 4] = [[64, 64, 64], [150, 100, 50], [0, 160, 0], [220, 30, 30]];

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// One channel of class ids.
    pub labels: MultiRaster,
    /// One probability channel per class.
    pub probs: MultiRaster,
}

fn single(r: &MultiRaster, what: &str) -> Result<()> {
    if r.channels() != 1 {
        return Err(VddNetError::DimensionMismatch(format!("{what} has {} channels, expected 1", r.channels())));
    }
    Ok(())
}

/// Tiles the orthophoto row-major into non-overlapping `tile × tile` windows;
/// windows past the right or bottom edge are mirror-padded and cropped back
/// after inference. `depth` is a vine mask (values > 0.5 count as vine).
pub fn segment_orthophoto(
    net: &Network<f32>,
    rgb: &MultiRaster,
    nir: &MultiRaster,
    depth: &MultiRaster,
    tile: u32,
) -> Result<SegmentationResult> {
    if rgb.channels() != 3 {
        return Err(VddNetError::DimensionMismatch(format!("rgb has {} channels", rgb.channels())));
    }
    single(nir, "nir")?;
    single(depth, "depth")?;
    if !rgb.same_dims(nir) || !rgb.same_dims(depth) {
        return Err(VddNetError::DimensionMismatch("rgb, nir and depth differ in size".into()));
    }
    let (w, h) = (rgb.width(), rgb.height());
    if w < tile || h < tile {
        return Err(VddNetError::TooSmall { width: w, height: h, tile });
    }
    let classes = net.spec.classes;
    let t = tile as usize;
    let (wu, hu) = (w as usize, h as usize);
    let mut probs = vec![0f32; wu * hu * classes];
    let mut labels = vec![0f32; wu * hu];
    for ty in (0..hu).step_by(t) {
        for tx in (0..wu).step_by(t) {
            let mut x_rgb = vec![0f32; 3 * t * t];
            let mut x_nir = vec![0f32; t * t];
            let mut x_depth = vec![0f32; t * t];
            for y in 0..t {
                let sy = mirror_index((ty + y) as i64, hu) as u32;
                for x in 0..t {
                    let sx = mirror_index((tx + x) as i64, wu) as u32;
                    let p = y * t + x;
                    for c in 0..3 {
                        x_rgb[c * t * t + p] = rgb.get(sx, sy, c) / 255.0;
                    }
                    x_nir[p] = nir.get(sx, sy, 0) / 255.0;
                    x_depth[p] = if depth.get(sx, sy, 0) > 0.5 { 1.0 } else { 0.0 };
                }
            }
            let inputs = Inputs {
                rgb: Tensor::new(vec![1, 3, t, t], x_rgb)?,
                nir: Tensor::new(vec![1, 1, t, t], x_nir)?,
                depth: Tensor::new(vec![1, 1, t, t], x_depth)?,
            };
            let out = net.predict(&inputs)?;
            let pd = out.data();
            for y in 0..t.min(hu - ty) {
                for x in 0..t.min(wu - tx) {
                    let p = y * t + x;
                    let o = (ty + y) * wu + tx + x;
                    let mut best = 0;
                    for k in 0..classes {
                        let v = pd[k * t * t + p];
                        probs[o * classes + k] = v;
                        if v > pd[best * t * t + p] {
                            best = k;
                        }
                    }
                    labels[o] = best as f32;
                }
            }
        }
    }
    let prob_roles = (0..classes as u8).map(ChannelRole::Prob).collect();
    let mut labels = MultiRaster::new(w, h, vec![ChannelRole::Label], labels)?;
    let mut probs = MultiRaster::new(w, h, prob_roles, probs)?;
    if let Some(g) = rgb.georef() {
        labels = labels.with_georef(g);
        probs = probs.with_georef(g);
    }
    Ok(SegmentationResult { labels, probs })
}

/// Colours a label map with [`PALETTE`].
pub fn render_disease_map(labels: &MultiRaster) -> Result<MultiRaster> {
    single(labels, "label map")?;
    let mut data = Vec::with_capacity(labels.pixel_count() * 3);
    for &v in labels.data() {
        let c = ClassId::from_value(v).map_err(|_| VddNetError::DimensionMismatch(format!("label value {v}")))?;
        data.extend(PALETTE[c as usize].iter().map(|&b| b as f32));
    }
    let mut out = MultiRaster::new(labels.width(), labels.height(), ChannelRole::RGB.to_vec(), data)?;
    if let Some(g) = labels.georef() {
        out = out.with_georef(g);
    }
    Ok(out)
}

/// Inverse of the palette.
pub fn class_of_color(rgb: [u8; 3]) -> Option<ClassId> {
    PALETTE.iter().position(|&p| p == rgb).and_then(|i| ClassId::from_u8(i as u8))
}
