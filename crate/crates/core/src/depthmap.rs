//! Binary vine-canopy depth map from a digital surface model.
//!
//! The chain is: box low-pass (terrain estimate) → canopy height
//! (DSM − DTM, clamped at 0) → percentile contrast stretch → Otsu threshold.

use thiserror::Error;

use crate::raster::{mirror_index, ChannelRole, MultiRaster, RasterError};

pub const DEFAULT_KERNEL: usize = 20;

#[derive(Debug, Error)]
pub enum DepthMapError {
    #[error("bad kernel size {k} for {width}x{height} raster")]
    BadKernel { k: usize, width: u32, height: u32 },
    #[error("expected a single-channel raster, got {0} channels")]
    NotSingleChannel(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, DepthMapError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmStats {
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub p1: f32,
    pub p99: f32,
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    let i = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[i.min(sorted.len() - 1)]
}

pub fn dsm_stats(img: &MultiRaster) -> DsmStats {
    let mut v = img.data().to_vec();
    v.sort_by(f32::total_cmp);
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    DsmStats {
        min: v[0],
        max: v[v.len() - 1],
        mean,
        p1: percentile_sorted(&v, 0.01),
        p99: percentile_sorted(&v, 0.99),
    }
}

fn single(img: &MultiRaster) -> Result<()> {
    if img.channels() != 1 {
        return Err(DepthMapError::NotSingleChannel(img.channels()));
    }
    Ok(())
}

/// 1-D box weights for a kernel of size `k`. Even sizes use `k + 1` taps with
/// half weight at both ends so the kernel stays centred.
fn box_taps(k: usize) -> Vec<(i64, f64)> {
    let half = (k / 2) as i64;
    if k % 2 == 1 {
        (-half..=half).map(|o| (o, 1.0)).collect()
    } else {
        (-half..=half).map(|o| (o, if o.abs() == half { 0.5 } else { 1.0 })).collect()
    }
}

fn filter_1d(src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, line_stride: usize, taps: &[(i64, f64)], norm: f64) {
    for line in 0..count {
        let base = line * line_stride;
        for i in 0..n {
            let mut acc = 0.0;
            for &(o, w) in taps {
                acc += w * src[base + mirror_index(i as i64 + o, n) * stride];
            }
            dst[base + i * stride] = acc / norm;
        }
    }
}

/// Terrain estimate: `k × k` mean filter with mirror-reflected borders.
pub fn lowpass_dtm(dsm: &MultiRaster, k: usize) -> Result<MultiRaster> {
    single(dsm)?;
    let (w, h) = (dsm.width() as usize, dsm.height() as usize);
    if k < 1 || k > w.min(h) {
        return Err(DepthMapError::BadKernel { k, width: dsm.width(), height: dsm.height() });
    }
    let taps = box_taps(k);
    let norm = k as f64;
    let src: Vec<f64> = dsm.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; w * h];
    filter_1d(&src, &mut tmp, w, 1, h, w, &taps, norm);
    let mut out = vec![0.0; w * h];
    filter_1d(&tmp, &mut out, h, w, w, 1, &taps, norm);
    let mut r = MultiRaster::from_plane(dsm.width(), dsm.height(), ChannelRole::Dsm, out.into_iter().map(|v| v as f32).collect())?;
    if let Some(g) = dsm.georef() {
        r = r.with_georef(g);
    }
    Ok(r)
}

/// `max(dsm − dtm, 0)` elementwise.
pub fn canopy_height(dsm: &MultiRaster, dtm: &MultiRaster) -> Result<MultiRaster> {
    single(dsm)?;
    single(dtm)?;
    if !dsm.same_dims(dtm) {
        return Err(RasterError::DimensionMismatch(format!(
            "dsm {}x{} vs dtm {}x{}",
            dsm.width(),
            dsm.height(),
            dtm.width(),
            dtm.height()
        ))
        .into());
    }
    let data = dsm.data().iter().zip(dtm.data()).map(|(&s, &t)| (s - t).max(0.0)).collect();
    Ok(MultiRaster::from_plane(dsm.width(), dsm.height(), ChannelRole::Dsm, data)?)
}

/// Linear stretch of `[p1, p99]` onto `[0, 255]`, clamped. A raster whose
/// percentiles coincide maps to all zeros.
pub fn normalize_contrast(img: &MultiRaster) -> Result<MultiRaster> {
    single(img)?;
    let stats = dsm_stats(img);
    let (lo, hi) = (stats.p1, stats.p99);
    if hi <= lo {
        return Ok(img.map(|_| 0.0)?);
    }
    let scale = 255.0 / (hi as f64 - lo as f64);
    Ok(img.map(|v| ((v as f64 - lo as f64) * scale).clamp(0.0, 255.0) as f32)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub threshold: u8,
    /// 1 where the level is above `threshold`.
    pub mask: MultiRaster,
    /// Set when one histogram bin holds every pixel; the mask is then all 0.
    pub degenerate: bool,
}

/// Histogram bin of a value in the 8-bit range.
#[inline]
pub fn level(v: f32) -> u8 {
    crate::raster::to_u8(v)
}

pub fn histogram256(img: &MultiRaster) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[level(v) as usize] += 1;
    }
    hist
}

/// 192-bit product of a u128 and a u64, as (high u64, low u128).
fn wide_mul(a: u128, b: u64) -> (u64, u128) {
    let lo = (a as u64) as u128 * b as u128;
    let hi = (a >> 64) * b as u128;
    let low = lo.wrapping_add(hi << 64);
    let carry = (low < lo) as u128;
    ((hi >> 64).wrapping_add(carry) as u64, low)
}

/// Threshold maximising the between-class variance over the 256-bin
/// histogram; ties go to the smallest level. Comparisons are exact integer
/// arithmetic on `(N·S₀ − n₀·S)² / (n₀·n₁)`.
pub fn otsu_level(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &h)| i as u128 * h as u128).sum();
    let mut n0: u64 = 0;
    let mut s0: u128 = 0;
    // best score as numerator / denominator
    let mut best: Option<(u8, u128, u64)> = None;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = total as i128 * s0 as i128;
        let b = n0 as i128 * sum as i128;
        let d = (a - b).unsigned_abs();
        let num = d.checked_mul(d).expect("histogram too large for exact Otsu");
        let den = n0 as u128 * n1 as u128;
        let den = u64::try_from(den).expect("histogram too large for exact Otsu");
        let better = match best {
            None => true,
            Some((_, bn, bd)) => wide_mul(num, bd) > wide_mul(bn, den),
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|b| b.0)
}

pub fn otsu_threshold(img: &MultiRaster) -> Result<OtsuResult> {
    single(img)?;
    let hist = histogram256(img);
    let occupied = hist.iter().filter(|&&h| h > 0).count();
    if occupied <= 1 {
        let t = hist.iter().position(|&h| h > 0).unwrap_or(0) as u8;
        return Ok(OtsuResult { threshold: t, mask: img.map(|_| 0.0)?.with_roles(vec![ChannelRole::Depth])?, degenerate: true });
    }
    let t = otsu_level(&hist).expect("two occupied bins");
    let mask = img.map(|v| if level(v) > t { 1.0 } else { 0.0 })?.with_roles(vec![ChannelRole::Depth])?;
    Ok(OtsuResult { threshold: t, mask, degenerate: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    /// Binary mask, 1 = above-ground vegetation.
    pub mask: MultiRaster,
    pub threshold: u8,
    pub degenerate: bool,
}

pub fn build_depth_map(dsm: &MultiRaster, k: usize) -> Result<DepthMap> {
    let dtm = lowpass_dtm(dsm, k)?;
    let height = canopy_height(dsm, &dtm)?;
    let norm = normalize_contrast(&height)?;
    let otsu = otsu_threshold(&norm)?;
    let mut mask = otsu.mask;
    if let Some(g) = dsm.georef() {
        mask = mask.with_georef(g);
    }
    Ok(DepthMap { mask, threshold: otsu.threshold, degenerate: otsu.degenerate })
}

/// Intersection over union of two binary masks (values > 0.5 are set).
pub fn mask_iou(a: &MultiRaster, b: &MultiRaster) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn plane(w: u32, h: u32, mut f: impl FnMut(u32, u32) -> f32) -> MultiRaster {
        MultiRaster::from_fn(w, h, vec![ChannelRole::Dsm], |x, y, _| f(x, y)).unwrap()
    }

    #[test]
    fn constant_and_identity_kernels() {
        let c = plane(30, 25, |_, _| 3.25);
        assert!(lowpass_dtm(&c, 20).unwrap().data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
        let r = plane(30, 25, |x, y| (x * 7 + y * 3) as f32 * 0.1);
        assert_eq!(lowpass_dtm(&r, 1).unwrap().data(), r.data());
    }

    #[test]
    fn impulse_response() {
        let imp = plane(5, 5, |x, y| if x == 2 && y == 2 { 1.0 } else { 0.0 });
        let out = lowpass_dtm(&imp, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&x) && (1..=3).contains(&y);
                let expect = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((out.get(x, y, 0) - expect).abs() < 1e-7, "({x},{y})");
            }
        }
    }

    #[test]
    fn bad_kernel() {
        let r = plane(10, 8, |_, _| 0.0);
        assert!(matches!(lowpass_dtm(&r, 0), Err(DepthMapError::BadKernel { .. })));
        assert!(matches!(lowpass_dtm(&r, 9), Err(DepthMapError::BadKernel { .. })));
        assert!(lowpass_dtm(&r, 8).is_ok());
    }

    #[test]
    fn canopy_height_cases() {
        let dsm = plane(8, 8, |x, _| x as f32);
        assert!(canopy_height(&dsm, &dsm).unwrap().data().iter().all(|&v| v == 0.0));
        let ditch = plane(8, 8, |x, _| if x == 3 { -2.0 } else { 0.0 });
        let flat = plane(8, 8, |_, _| 0.0);
        assert!(canopy_height(&ditch, &flat).unwrap().data().iter().all(|&v| v == 0.0));
        let small = plane(4, 8, |_, _| 0.0);
        assert!(canopy_height(&dsm, &small).is_err());
    }

    #[test]
    fn canopy_rows_stand_out() {
        // rows 4 px wide every 16 px, 0.8 above flat ground
        let dsm = plane(64, 64, |x, _| if x % 16 < 4 { 10.8 } else { 10.0 });
        let h = canopy_height(&dsm, &lowpass_dtm(&dsm, 9).unwrap()).unwrap();
        // skip the first row, which mirrors onto itself at the border
        for y in 0..64 {
            for x in 16..64 {
                let v = h.get(x, y, 0);
                if x % 16 < 4 {
                    assert!(v > 0.3, "row pixel {x} has {v}");
                } else if x % 16 >= 8 && x % 16 < 12 {
                    assert!(v < 1e-6);
                }
            }
        }
    }

    #[test]
    fn contrast_stretch() {
        let two = plane(10, 10, |x, _| if x < 5 { 0.1 } else { 0.9 });
        let out = normalize_contrast(&two).unwrap();
        for (a, b) in two.data().iter().zip(out.data()) {
            assert_eq!(*b, if *a < 0.5 { 0.0 } else { 255.0 });
        }
        let c = plane(6, 6, |_, _| 4.0);
        assert!(normalize_contrast(&c).unwrap().data().iter().all(|&v| v == 0.0));
        // values 0..=255 with >1% mass at each end: p1 = 0, p99 = 255
        let spread = plane(256, 4, |x, y| if y == 0 && x < 20 { 0.0 } else if y == 3 && x > 235 { 255.0 } else { x as f32 });
        let out = normalize_contrast(&spread).unwrap();
        for (a, b) in spread.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0);
        }
    }

    /// Exhaustive oracle: tries every threshold, recomputing class statistics
    /// from the pixel list, comparing exact rationals.
    fn brute_force_otsu(values: &[u8]) -> Option<u8> {
        use num_bigint::BigInt;
        let mut best: Option<(u8, BigInt, BigInt)> = None;
        for t in 0..=255u16 {
            let (mut n0, mut n1, mut s0, mut s1) = (0i64, 0i64, 0i64, 0i64);
            for &v in values {
                if v as u16 <= t {
                    n0 += 1;
                    s0 += v as i64;
                } else {
                    n1 += 1;
                    s1 += v as i64;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            // w0·w1·(μ0 − μ1)² ∝ (s0·n1 − s1·n0)² / (n0·n1)
            let d = BigInt::from(s0 * n1 - s1 * n0);
            let num = &d * &d;
            let den = BigInt::from(n0) * BigInt::from(n1);
            let better = match &best {
                None => true,
                Some((_, bn, bd)) => &num * bd > bn * &den,
            };
            if better {
                best = Some((t as u8, num, den));
            }
        }
        best.map(|b| b.0)
    }

    #[test]
    fn otsu_two_levels() {
        let img = plane(10, 10, |x, _| if x < 5 { 10.0 } else { 200.0 });
        let r = otsu_threshold(&img).unwrap();
        assert_eq!(r.threshold, 10);
        assert!(!r.degenerate);
        for (v, m) in img.data().iter().zip(r.mask.data()) {
            assert_eq!(*m, if *v > 100.0 { 1.0 } else { 0.0 });
        }
        let vals: Vec<u8> = img.data().iter().map(|&v| v as u8).collect();
        assert_eq!(brute_force_otsu(&vals), Some(10));
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        let img = plane(7, 7, |_, _| 42.0);
        let r = otsu_threshold(&img).unwrap();
        assert!(r.degenerate);
        assert!(r.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn otsu_gaussian_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Normal::new(50.0f32, 10.0).unwrap();
        let b = Normal::new(180.0f32, 10.0).unwrap();
        let n = 20_000;
        let mut truth = Vec::with_capacity(n);
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let hi = rng.random_bool(0.5);
                truth.push(hi);
                let v = if hi { b.sample(&mut rng) } else { a.sample(&mut rng) };
                v.clamp(0.0, 255.0).round()
            })
            .collect();
        let img = MultiRaster::from_plane(200, 100, ChannelRole::Dsm, data).unwrap();
        let r = otsu_threshold(&img).unwrap();
        assert!((90..=140).contains(&r.threshold), "t = {}", r.threshold);
        let errors = r.mask.data().iter().zip(&truth).filter(|(m, t)| (**m > 0.5) != **t).count();
        assert!((errors as f64 / n as f64) < 0.01);
        let vals: Vec<u8> = img.data().iter().map(|&v| v as u8).collect();
        assert_eq!(brute_force_otsu(&vals), Some(r.threshold));
    }

    #[test]
    fn flat_dsm_gives_empty_map() {
        let dsm = plane(40, 40, |_, _| 12.5);
        let d = build_depth_map(&dsm, 20).unwrap();
        assert!(d.degenerate);
        assert!(d.mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wide_mul_matches_reference() {
        let a: u128 = (1u128 << 100) + 12345;
        let (hi, lo) = wide_mul(a, u64::MAX);
        // (2^100 + 12345)(2^64 − 1) = 2^164 − 2^100 + 12345·2^64 − 12345
        let expect_lo = (12345u128 << 64).wrapping_sub(1u128 << 100).wrapping_sub(12345);
        assert_eq!(lo, expect_lo);
        assert_eq!(hi, (1u64 << 36) - 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn otsu_matches_exhaustive_search(vals in proptest::collection::vec(0u8..=255, 64..400)) {
            let n = vals.len() as u32;
            let img = MultiRaster::from_plane(n, 1, ChannelRole::Dsm, vals.iter().map(|&v| v as f32).collect()).unwrap();
            let r = otsu_threshold(&img).unwrap();
            match brute_force_otsu(&vals) {
                Some(t) => prop_assert_eq!(t, r.threshold),
                None => prop_assert!(r.degenerate),
            }
        }

        #[test]
        fn lowpass_preserves_mean(w in 6u32..40, h in 6u32..40, k in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = plane(w, h, |_, _| rng.random_range(0.0f32..10.0));
            let out = lowpass_dtm(&r, k).unwrap();
            let m0 = r.data().iter().map(|&v| v as f64).sum::<f64>() / r.data().len() as f64;
            let m1 = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.data().len() as f64;
            prop_assert!((m0 - m1).abs() <= 1e-6 * m0.abs().max(1e-12), "{} vs {}", m0, m1);
        }

        #[test]
        fn depth_map_translation_invariant(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 2, 4, 8]), shift in -64i32..64) {
            // dyadic heights keep every step of the chain exact
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dsm = plane(32, 32, |x, _| (rng.random_range(0..64) as f32) / 64.0 + if x % 8 < 3 { 1.0 } else { 0.0 });
            let moved = dsm.map(|v| v + shift as f32).unwrap();
            let a = build_depth_map(&dsm, k).unwrap();
            let b = build_depth_map(&moved, k).unwrap();
            prop_assert_eq!(a.mask.data(), b.mask.data());
        }

        #[test]
        fn canopy_height_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dsm = plane(24, 24, |_, _| rng.random_range(-5.0f32..5.0));
            let h = canopy_height(&dsm, &lowpass_dtm(&dsm, 5).unwrap()).unwrap();
            prop_assert!(h.data().iter().all(|&v| v >= 0.0));
        }
    }
}
