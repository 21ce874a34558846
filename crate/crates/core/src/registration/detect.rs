//! Multi-scale Harris corners with a gradient-orientation histogram
//! descriptor.
//!
//! Stands in for AKAZE behind the same interface: keypoints carry a
//! sub-pixel position, a scale, a dominant orientation and a fixed-length
//! descriptor, which is all the matching and homography stages consume.

use super::{Keypoint, RegistrationError, Result};
use crate::raster::{mirror_index, MultiRaster};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub max_keypoints: usize,
    pub octaves: usize,
    pub harris_k: f32,
    /// Integration scale of the structure tensor, in octave pixels.
    pub sigma: f32,
    /// Keep responses above this fraction of the octave maximum.
    pub rel_threshold: f32,
    pub nms_radius: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { max_keypoints: 1000, octaves: 3, harris_k: 0.04, sigma: 1.5, rel_threshold: 0.01, nms_radius: 3 }
    }
}

pub const DESCRIPTOR_LEN: usize = 64;
const MIN_DIM: u32 = 32;

struct Octave {
    w: usize,
    h: usize,
    factor: f32,
    ix: Vec<f32>,
    iy: Vec<f32>,
}

fn downsample(img: &[f32], w: usize, h: usize) -> (Vec<f32>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let a = img[2 * y * w + 2 * x] + img[2 * y * w + 2 * x + 1];
            let b = img[(2 * y + 1) * w + 2 * x] + img[(2 * y + 1) * w + 2 * x + 1];
            out[y * w2 + x] = (a + b) * 0.25;
        }
    }
    (out, w2, h2)
}

fn gradients(img: &[f32], w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
    let mut ix = vec![0.0; w * h];
    let mut iy = vec![0.0; w * h];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            ix[y * w + x] = 0.5 * (img[y * w + xp] - img[y * w + xm]);
            iy[y * w + x] = 0.5 * (img[yp * w + x] - img[ym * w + x]);
        }
    }
    (ix, iy)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + mirror_index(x as i64 + k as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[mirror_index(y as i64 + k as i64 - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

#[inline]
fn bilinear(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
    let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
    top + (bot - top) * fy
}

struct Candidate {
    x: f32,
    y: f32,
    response: f32,
}

fn harris_candidates(oct: &Octave, params: &DetectorParams) -> Vec<Candidate> {
    let (w, h) = (oct.w, oct.h);
    let kernel = gaussian_kernel(params.sigma);
    let xx: Vec<f32> = oct.ix.iter().map(|v| v * v).collect();
    let yy: Vec<f32> = oct.iy.iter().map(|v| v * v).collect();
    let xy: Vec<f32> = oct.ix.iter().zip(&oct.iy).map(|(a, b)| a * b).collect();
    let (sxx, syy, sxy) = (blur(&xx, w, h, &kernel), blur(&yy, w, h, &kernel), blur(&xy, w, h, &kernel));
    let resp: Vec<f32> = (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - params.harris_k * tr * tr
        })
        .collect();
    let max = resp.iter().copied().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let thr = params.rel_threshold * max;
    let r = params.nms_radius as i64;
    let mut out: Vec<Candidate> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = resp[y * w + x];
            if v <= thr {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -r..=r {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as i64 + dx;
                    if xx < 0 || xx >= w as i64 || (dx == 0 && dy == 0) {
                        continue;
                    }
                    if resp[yy as usize * w + xx as usize] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let at = |xx: usize, yy: usize| resp[yy * w + xx];
            let offset = |m: f32, c: f32, p: f32| {
                let den = 2.0 * (2.0 * c - m - p);
                if den > 0.0 {
                    ((p - m) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let dx = if x > 0 && x + 1 < w { offset(at(x - 1, y), v, at(x + 1, y)) } else { 0.0 };
            let dy = if y > 0 && y + 1 < h { offset(at(x, y - 1), v, at(x, y + 1)) } else { 0.0 };
            out.push(Candidate { x: x as f32 + dx, y: y as f32 + dy, response: v });
        }
    }
    // Plateau maxima refine to the same sub-pixel location; merge them.
    let mut merged: Vec<Candidate> = Vec::with_capacity(out.len());
    'outer: for c in out {
        for m in merged.iter_mut() {
            if (m.x - c.x).abs() < 1.0 && (m.y - c.y).abs() < 1.0 {
                if c.response > m.response {
                    *m = c;
                } else if c.response == m.response {
                    m.x = 0.5 * (m.x + c.x);
                    m.y = 0.5 * (m.y + c.y);
                }
                continue 'outer;
            }
        }
        merged.push(c);
    }
    merged
}

fn dominant_orientation(oct: &Octave, x: f32, y: f32, sigma: f32) -> f32 {
    const BINS: usize = 36;
    let mut hist = [0f32; BINS];
    let r = (3.0 * sigma).ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 || px >= oct.w as i64 || py >= oct.h as i64 {
                continue;
            }
            let i = py as usize * oct.w + px as usize;
            let (gx, gy) = (oct.ix[i], oct.iy[i]);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let wgt = (-((dx * dx + dy * dy) as f32) / (2.0 * sigma * sigma)).exp();
            let a = gy.atan2(gx).rem_euclid(std::f32::consts::TAU);
            let b = ((a / std::f32::consts::TAU * BINS as f32) as usize).min(BINS - 1);
            hist[b] += wgt * mag;
        }
    }
    let (k, &peak) = hist
        .iter()
        .enumerate()
        .fold((0, &0.0f32), |best, cur| if cur.1 > best.1 { cur } else { best });
    if peak == 0.0 {
        return 0.0;
    }
    let m = hist[(k + BINS - 1) % BINS];
    let p = hist[(k + 1) % BINS];
    let den = m - 2.0 * peak + p;
    let off = if den < 0.0 { 0.5 * (m - p) / den } else { 0.0 };
    ((k as f32 + 0.5 + off) / BINS as f32 * std::f32::consts::TAU).rem_euclid(std::f32::consts::TAU)
}

/// 4×4 spatial cells × 4 orientation bins, rotated to the keypoint frame.
fn describe(oct: &Octave, x: f32, y: f32, orientation: f32, spacing: f32) -> Vec<f32> {
    let mut d = vec![0f32; DESCRIPTOR_LEN];
    let (s, c) = orientation.sin_cos();
    for v in 0..16 {
        for u in 0..16 {
            let lu = (u as f32 - 7.5) * spacing;
            let lv = (v as f32 - 7.5) * spacing;
            let px = x + c * lu - s * lv;
            let py = y + s * lu + c * lv;
            if px < 0.0 || py < 0.0 || px > (oct.w - 1) as f32 || py > (oct.h - 1) as f32 {
                continue;
            }
            let gx = bilinear(&oct.ix, oct.w, oct.h, px, py);
            let gy = bilinear(&oct.iy, oct.w, oct.h, px, py);
            // gradient in the keypoint frame
            let rx = c * gx + s * gy;
            let ry = -s * gx + c * gy;
            let mag = (rx * rx + ry * ry).sqrt();
            if mag == 0.0 {
                continue;
            }
            let wgt = (-((u as f32 - 7.5).powi(2) + (v as f32 - 7.5).powi(2)) / 64.0).exp();
            let a = ry.atan2(rx).rem_euclid(std::f32::consts::TAU);
            let bin = ((a / std::f32::consts::FRAC_PI_2) as usize).min(3);
            let cell = (v / 4) * 4 + u / 4;
            d[cell * 4 + bin] += wgt * mag;
        }
    }
    normalize_descriptor(&mut d);
    d
}

fn normalize_descriptor(d: &mut [f32]) {
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm == 0.0 {
        return;
    }
    d.iter_mut().for_each(|v| *v = (*v / norm).min(0.2));
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    d.iter_mut().for_each(|v| *v /= norm);
}

/// Detects keypoints on a single-channel image, strongest first.
pub fn detect_keypoints(img: &MultiRaster, params: &DetectorParams) -> Result<Vec<Keypoint>> {
    if img.channels() != 1 {
        return Err(RegistrationError::NotSingleChannel(img.channels()));
    }
    if img.width().min(img.height()) < MIN_DIM {
        return Err(RegistrationError::ImageTooSmall { width: img.width(), height: img.height() });
    }
    let (width, height) = (img.width() as f32, img.height() as f32);
    let mut plane = img.data().to_vec();
    let (mut w, mut h) = (img.width() as usize, img.height() as usize);
    let mut keypoints = Vec::new();
    for o in 0..params.octaves.max(1) {
        if o > 0 {
            if w / 2 < 16 || h / 2 < 16 {
                break;
            }
            let (p, w2, h2) = downsample(&plane, w, h);
            plane = p;
            w = w2;
            h = h2;
        }
        let (ix, iy) = gradients(&plane, w, h);
        let oct = Octave { w, h, factor: (1u32 << o) as f32, ix, iy };
        for c in harris_candidates(&oct, params) {
            let orientation = dominant_orientation(&oct, c.x, c.y, 1.5 * params.sigma);
            let descriptor = describe(&oct, c.x, c.y, orientation, 0.75 * params.sigma);
            let fx = ((c.x + 0.5) * oct.factor - 0.5).clamp(0.0, width - 1e-3);
            let fy = ((c.y + 0.5) * oct.factor - 0.5).clamp(0.0, height - 1e-3);
            keypoints.push(Keypoint {
                x: fx,
                y: fy,
                scale: params.sigma * oct.factor,
                orientation,
                response: c.response,
                descriptor,
            });
        }
    }
    keypoints.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    keypoints.truncate(params.max_keypoints);
    Ok(keypoints)
}
