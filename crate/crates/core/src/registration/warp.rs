use super::homography::{apply_h, Homography, Point2};
use super::{RegistrationError, Result};
use crate::raster::{MultiRaster, RasterError};

/// Inverse-maps every output pixel through `h⁻¹` and samples `img`
/// bilinearly. Pixels whose source falls outside `img` are 0.
pub fn warp(img: &MultiRaster, h: &Homography, out_width: u32, out_height: u32) -> Result<MultiRaster> {
    let inv = h.h.try_inverse().ok_or(RegistrationError::SingularHomography)?;
    if !inv.iter().all(|v| v.is_finite()) || h.h.determinant().abs() < 1e-12 {
        return Err(RegistrationError::SingularHomography);
    }
    let (w, hh, c) = (img.width() as usize, img.height() as usize, img.channels());
    let src = img.data();
    let mut out = vec![0f32; out_width as usize * out_height as usize * c];
    for y in 0..out_height as usize {
        for x in 0..out_width as usize {
            let s = apply_h(&inv, Point2::new(x as f64, y as f64));
            if !(s.x >= 0.0 && s.y >= 0.0 && s.x <= (w - 1) as f64 && s.y <= (hh - 1) as f64) {
                continue;
            }
            let x0 = (s.x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (s.y.floor() as usize).min(hh.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(hh - 1);
            let fx = s.x - x0 as f64;
            let fy = s.y - y0 as f64;
            let o = (y * out_width as usize + x) * c;
            for ch in 0..c {
                let v = |xx: usize, yy: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = v(x0, y0) + (v(x1, y0) - v(x0, y0)) * fx;
                let bot = v(x0, y1) + (v(x1, y1) - v(x0, y1)) * fx;
                out[o + ch] = (top + (bot - top) * fy) as f32;
            }
        }
    }
    let mut r = MultiRaster::new(out_width, out_height, img.roles().to_vec(), out)?;
    if let Some(g) = img.georef() {
        r = r.with_georef(g);
    }
    Ok(r)
}

/// Checkerboard of `cell`-sized squares taken alternately from `a` (top-left)
/// and `b`, for visual alignment checks.
pub fn chessboard_composite(a: &MultiRaster, b: &MultiRaster, cell: u32) -> Result<MultiRaster> {
    if !a.same_dims(b) || a.channels() != b.channels() {
        return Err(RasterError::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        ))
        .into());
    }
    let cell = cell.max(1);
    let c = a.channels();
    let mut data = Vec::with_capacity(a.data().len());
    for y in 0..a.height() {
        for x in 0..a.width() {
            let src = if ((x / cell) + (y / cell)) % 2 == 0 { a } else { b };
            let i = src.index(x, y, 0);
            data.extend_from_slice(&src.data()[i..i + c]);
        }
    }
    Ok(MultiRaster::new(a.width(), a.height(), a.roles().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ChannelRole;

    fn smooth(w: u32, h: u32) -> MultiRaster {
        MultiRaster::from_fn(w, h, vec![ChannelRole::Green], |x, y, _| {
            let (x, y) = (x as f32, y as f32);
            120.0 + 60.0 * (x / 17.0).sin() * (y / 23.0).cos() + 0.2 * x
        })
        .unwrap()
    }

    #[test]
    fn identity_warp() {
        let img = smooth(40, 30);
        assert_eq!(warp(&img, &Homography::identity(), 40, 30).unwrap(), img);
    }

    #[test]
    fn unit_shift() {
        let img = MultiRaster::from_fn(6, 4, vec![ChannelRole::Nir], |x, _, _| x as f32 * 10.0 + 1.0).unwrap();
        let out = warp(&img, &Homography::translation(1.0, 0.0), 6, 4).unwrap();
        for y in 0..4 {
            assert_eq!(out.get(0, y, 0), 0.0);
            for x in 1..6 {
                assert_eq!(out.get(x, y, 0), img.get(x - 1, y, 0));
            }
        }
    }

    #[test]
    fn forward_then_inverse_psnr() {
        let img = smooth(128, 128);
        let h = Homography::from_rows([[1.02, 0.03, 4.0], [-0.02, 0.99, -3.0], [1e-5, -2e-5, 1.0]]).unwrap();
        let there = warp(&img, &h, 128, 128).unwrap();
        let back = warp(&there, &h.inverse().unwrap(), 128, 128).unwrap();
        // compare on the interior, away from the zero-filled margins
        let mut se = 0.0f64;
        let mut n = 0;
        for y in 16..112 {
            for x in 16..112 {
                se += (back.get(x, y, 0) as f64 - img.get(x, y, 0) as f64).powi(2);
                n += 1;
            }
        }
        let psnr = 10.0 * (255.0f64.powi(2) / (se / n as f64)).log10();
        assert!(psnr > 40.0, "psnr {psnr}");
    }

    #[test]
    fn constant_preserved_where_covered() {
        let img = MultiRaster::filled(50, 50, vec![ChannelRole::Red], 77.25).unwrap();
        let h = Homography::from_rows([[0.97, 0.05, 2.5], [-0.04, 1.01, 1.5], [0.0, 0.0, 1.0]]).unwrap();
        let out = warp(&img, &h, 50, 50).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 77.25));
        assert!(out.data().iter().filter(|&&v| v == 77.25).count() > 2000);
    }

    #[test]
    fn singular_rejected() {
        let img = smooth(8, 8);
        let h = Homography { h: nalgebra::Matrix3::zeros(), inliers: vec![], rmse: 0.0 };
        assert!(matches!(warp(&img, &h, 8, 8), Err(RegistrationError::SingularHomography)));
    }

    #[test]
    fn chessboard_pattern() {
        let a = MultiRaster::filled(4, 4, vec![ChannelRole::Red, ChannelRole::Green], 0.0).unwrap();
        let b = MultiRaster::filled(4, 4, vec![ChannelRole::Red, ChannelRole::Green], 1.0).unwrap();
        let out = chessboard_composite(&a, &b, 2).unwrap();
        let expect = [[0., 0., 1., 1.], [0., 0., 1., 1.], [1., 1., 0., 0.], [1., 1., 0., 0.]];
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    assert_eq!(out.get(x, y, c), expect[y as usize][x as usize]);
                }
            }
        }
        assert_eq!(chessboard_composite(&a, &a, 3).unwrap(), a);
        // cell as wide as the image: bands of rows alternate
        let ta = MultiRaster::filled(4, 8, vec![ChannelRole::Red], 0.0).unwrap();
        let tb = MultiRaster::filled(4, 8, vec![ChannelRole::Red], 1.0).unwrap();
        let wide = chessboard_composite(&ta, &tb, 4).unwrap();
        for y in 0..8 {
            for x in 0..4 {
                assert_eq!(wide.get(x, y, 0), if y < 4 { 0.0 } else { 1.0 });
            }
        }
        let c = MultiRaster::filled(4, 5, vec![ChannelRole::Red, ChannelRole::Green], 1.0).unwrap();
        assert!(chessboard_composite(&a, &c, 2).is_err());
    }
}
