//! Deterministic synthetic vineyard scenes with ground truth.
//!
//! Vine rows are straight bands with wobbly edges over an undulating
//! terrain. Each row may cast a shadow band onto the ground on one side, and
//! disease appears as elliptical patches on the canopy. RGB and NIR are
//! rendered independently so that NIR carries information RGB does not.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::ClassId;
use crate::raster::{ChannelRole, MultiRaster, RasterError};
use crate::registration::{warp, Homography, Point2, RegistrationError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundPalette {
    /// Grass whose colour overlaps healthy canopy.
    Green,
    /// Bare soil.
    Brown,
    /// Patches of both.
    Mixed,
}

impl fmt::Display for GroundPalette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroundPalette::Green => "green",
            GroundPalette::Brown => "brown",
            GroundPalette::Mixed => "mixed",
        })
    }
}

impl FromStr for GroundPalette {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "green" => Ok(GroundPalette::Green),
            "brown" => Ok(GroundPalette::Brown),
            "mixed" => Ok(GroundPalette::Mixed),
            _ => Err(SynthError::InvalidConfig(format!("unknown ground palette {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    /// Centre-to-centre row distance in pixels.
    pub row_spacing: f64,
    pub row_width: f64,
    /// Row direction in degrees; 0 runs rows along the y axis.
    pub row_orientation: f64,
    pub ground_palette: GroundPalette,
    pub terrain_amplitude: f64,
    /// Terrain wavelength in pixels.
    pub terrain_wavelength: f64,
    pub canopy_height: f64,
    /// Target fraction of canopy pixels that are diseased.
    pub disease_fraction: f64,
    /// Fraction of each inter-row gap covered by the shadow band.
    pub shadow_fraction: f64,
    pub noise_rgb: f64,
    pub noise_nir: f64,
    pub noise_dsm: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            row_spacing: 40.0,
            row_width: 16.0,
            row_orientation: 0.0,
            ground_palette: GroundPalette::Mixed,
            terrain_amplitude: 2.0,
            terrain_wavelength: 256.0,
            canopy_height: 0.8,
            disease_fraction: 0.15,
            shadow_fraction: 0.25,
            noise_rgb: 6.0,
            noise_nir: 6.0,
            noise_dsm: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.width < 256 || self.height < 256 {
            return bad(format!("dims {}x{} below 256", self.width, self.height));
        }
        if !(self.row_width > 0.0 && self.row_spacing > self.row_width) {
            return bad(format!("row width {} must be positive and below spacing {}", self.row_width, self.row_spacing));
        }
        for (name, v) in [("disease_fraction", self.disease_fraction), ("shadow_fraction", self.shadow_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("terrain_amplitude", self.terrain_amplitude),
            ("canopy_height", self.canopy_height),
            ("noise_rgb", self.noise_rgb),
            ("noise_nir", self.noise_nir),
            ("noise_dsm", self.noise_dsm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if !(self.terrain_wavelength > 0.0 && self.row_orientation.is_finite()) {
            return bad("terrain wavelength must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub rgb: MultiRaster,
    pub nir: MultiRaster,
    pub dsm: MultiRaster,
    pub labels: MultiRaster,
    /// 1 where the vine canopy is.
    pub canopy_mask: MultiRaster,
    /// Pixel count per class.
    pub census: [u64; 4],
}

/// Mean radiometry per surface. RGB and NIR on a 0..255 scale.
struct Surface {
    rgb: [f64; 3],
    nir: f64,
}

const HEALTHY: Surface = Surface { rgb: [62.0, 138.0, 52.0], nir: 200.0 };
// grass shares the canopy signature, so only height tells them apart
const GREEN_GROUND: Surface = Surface { rgb: HEALTHY.rgb, nir: HEALTHY.nir };
const BROWN_GROUND: Surface = Surface { rgb: [150.0, 112.0, 72.0], nir: 90.0 };
const DISEASE_COLORS: [[f64; 3]; 3] = [[205.0, 190.0, 60.0], [140.0, 92.0, 42.0], [212.0, 162.0, 48.0]];
const DISEASED_NIR: f64 = 110.0;
const SHADOW_GAIN: f64 = 0.3;

/// Smooth seeded field in [-1, 1] from a handful of sinusoids.
struct Field {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, wavelength: f64, n: usize) -> Self {
        let waves = (0..n)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / (wavelength * rng.random_range(0.7..1.3));
                (k * ang.cos(), k * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU), 1.0)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
        s / self.waves.len() as f64
    }
}

fn plane(w: u32, h: u32, role: ChannelRole, v: Vec<f32>) -> Result<MultiRaster> {
    Ok(MultiRaster::from_plane(w, h, role, v)?)
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = rng.random_range(0.0..cfg.row_spacing);
    let (sn, cs) = cfg.row_orientation.to_radians().sin_cos();
    let wobble = Field::new(&mut rng, 60.0, 3);
    let terrain = Field::new(&mut rng, cfg.terrain_wavelength, 2);
    let palette_mix = Field::new(&mut rng, 150.0, 3);
    let texture = Field::new(&mut rng, 9.0, 4);
    let gap = cfg.row_spacing - cfg.row_width;
    let shadow_w = cfg.shadow_fraction * gap;

    // geometry: canopy and shadow membership
    let mut canopy = vec![false; n];
    let mut shadow = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let u = xf * cs + yf * sn;
            let v = -xf * sn + yf * cs;
            // row index changes mid-gap, so each row wobbles as one piece
            let d = u - phase;
            let k = ((d - cfg.row_width - gap / 2.0) / cfg.row_spacing).floor() + 1.0;
            let edge = 1.5 * wobble.at(v, 37.0 * k);
            let r = d + edge - k * cfg.row_spacing;
            let i = y * w + x;
            canopy[i] = (0.0..cfg.row_width).contains(&r);
            shadow[i] = !canopy[i] && r >= 0.0 && r < cfg.row_width + shadow_w;
        }
    }

    // disease: elliptical patches on canopy until the target share is reached
    let canopy_idx: Vec<usize> = (0..n).filter(|&i| canopy[i]).collect();
    let mut disease_color = vec![u8::MAX; n];
    let target = (cfg.disease_fraction * canopy_idx.len() as f64).round() as usize;
    let mut diseased = 0usize;
    if cfg.disease_fraction >= 1.0 {
        for &i in &canopy_idx {
            disease_color[i] = rng.random_range(0..3u8);
        }
        diseased = canopy_idx.len();
    }
    while diseased < target {
        let c = canopy_idx[rng.random_range(0..canopy_idx.len())];
        let (cx, cy) = ((c % w) as f64, (c / w) as f64);
        let (a, b): (f64, f64) = (rng.random_range(3.0..9.0), rng.random_range(2.0..6.0));
        let (s, k) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        let color = rng.random_range(0..3u8);
        let r = a.max(b).ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                let (ex, ey) = (dx as f64 * k + dy as f64 * s, -dx as f64 * s + dy as f64 * k);
                if (ex / a).powi(2) + (ey / b).powi(2) > 1.0 {
                    continue;
                }
                let i = py as usize * w + px as usize;
                if canopy[i] && disease_color[i] == u8::MAX {
                    disease_color[i] = color;
                    diseased += 1;
                }
            }
        }
    }

    // radiometry and labels
    let rgb_noise = Normal::new(0.0, cfg.noise_rgb.max(1e-12)).expect("valid sigma");
    let nir_noise = Normal::new(0.0, cfg.noise_nir.max(1e-12)).expect("valid sigma");
    let dsm_noise = Normal::new(0.0, cfg.noise_dsm.max(1e-12)).expect("valid sigma");
    let mut rgb = Vec::with_capacity(3 * n);
    let mut nir = Vec::with_capacity(n);
    let mut dsm = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut census = [0u64; 4];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xf, yf) = (x as f64, y as f64);
            let tex = 1.0 + 0.08 * texture.at(xf, yf);
            let (col, nv, class) = if canopy[i] {
                if disease_color[i] != u8::MAX {
                    (DISEASE_COLORS[disease_color[i] as usize], DISEASED_NIR, ClassId::Diseased)
                } else {
                    (HEALTHY.rgb, HEALTHY.nir, ClassId::Healthy)
                }
            } else {
                let t = match cfg.ground_palette {
                    GroundPalette::Green => 0.0,
                    GroundPalette::Brown => 1.0,
                    GroundPalette::Mixed => (0.5 + 1.5 * palette_mix.at(xf, yf)).clamp(0.0, 1.0),
                };
                let lerp = |a: f64, b: f64| a + (b - a) * t;
                let mut col = [0.0; 3];
                for c in 0..3 {
                    col[c] = lerp(GREEN_GROUND.rgb[c], BROWN_GROUND.rgb[c]);
                }
                let mut nv = lerp(GREEN_GROUND.nir, BROWN_GROUND.nir);
                if shadow[i] {
                    col = col.map(|v| v * SHADOW_GAIN);
                    nv *= SHADOW_GAIN;
                    (col, nv, ClassId::Shadow)
                } else {
                    (col, nv, ClassId::Ground)
                }
            };
            for c in col {
                rgb.push((c * tex + rgb_noise.sample(&mut rng)).clamp(0.0, 255.0) as f32);
            }
            nir.push((nv * tex + nir_noise.sample(&mut rng)).clamp(0.0, 255.0) as f32);
            let ground = cfg.terrain_amplitude * terrain.at(xf, yf);
            let top = if canopy[i] { cfg.canopy_height } else { 0.0 };
            dsm.push((ground + top + dsm_noise.sample(&mut rng)) as f32);
            labels.push(class as u8 as f32);
            mask.push(if canopy[i] { 1.0 } else { 0.0 });
            census[class as usize] += 1;
        }
    }
    let (wu, hu) = (cfg.width, cfg.height);
    Ok(SyntheticScene {
        rgb: MultiRaster::new(wu, hu, ChannelRole::RGB.to_vec(), rgb)?,
        nir: plane(wu, hu, ChannelRole::Nir, nir)?,
        dsm: plane(wu, hu, ChannelRole::Dsm, dsm)?,
        labels: plane(wu, hu, ChannelRole::Label, labels)?,
        canopy_mask: plane(wu, hu, ChannelRole::Depth, mask)?,
        census,
    })
}

pub fn census_text(census: &[u64; 4]) -> String {
    let mut s = String::from("class,pixels\n");
    for c in ClassId::ALL {
        s.push_str(&format!("{},{}\n", c.name(), census[c as usize]));
    }
    s
}

/// A reference scene and the infrared camera's view of it.
#[derive(Debug, Clone)]
pub struct MisalignedPair {
    pub scene: SyntheticScene,
    /// Red, green and NIR planes of the infrared camera.
    pub moving: MultiRaster,
    /// Maps moving-image coordinates onto the reference (the value a
    /// registration should recover).
    pub truth: Homography,
}

/// Renders the infrared camera's view, `moving(p) = reference(h·p)`, with
/// additive Gaussian noise of standard deviation `noise`.
pub fn generate_misaligned_pair(cfg: &SceneConfig, h: &Homography, noise: f64) -> Result<MisalignedPair> {
    let scene = generate_scene(cfg)?;
    let inv = h.inverse().map_err(|_| SynthError::InvalidConfig("homography is not invertible".into()))?;
    let (w, hh) = (cfg.width as f64, cfg.height as f64);
    let limit = 0.2 * w.min(hh);
    for (x, y) in [(0.0, 0.0), (w - 1.0, 0.0), (0.0, hh - 1.0), (w - 1.0, hh - 1.0)] {
        let q = h.apply(Point2::new(x, y));
        if !(q.x.is_finite() && q.y.is_finite()) || (q.x - x).hypot(q.y - y) > limit {
            return Err(SynthError::InvalidConfig(format!("corner ({x},{y}) moves beyond 20% of the image")));
        }
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(SynthError::InvalidConfig(format!("noise {noise}")));
    }
    let r = scene.rgb.plane(0);
    let g = scene.rgb.plane(1);
    let nir = scene.nir.data();
    let mut data = Vec::with_capacity(3 * r.len());
    for i in 0..r.len() {
        data.extend([r[i], g[i], nir[i]]);
    }
    let stacked = MultiRaster::new(
        cfg.width,
        cfg.height,
        vec![ChannelRole::Red, ChannelRole::Green, ChannelRole::Nir],
        data,
    )?;
    // warp computes out(p) = img(H⁻¹·p); passing h⁻¹ gives img(h·p)
    let warped = warp(&stacked, &inv, cfg.width, cfg.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let dist = Normal::new(0.0, noise.max(1e-12)).expect("valid sigma");
    let moving = warped.map(|v| (v as f64 + if noise > 0.0 { dist.sample(&mut rng) } else { 0.0 }).clamp(0.0, 255.0) as f32)?;
    Ok(MisalignedPair { scene, moving, truth: Homography::from_matrix(h.h)? })
}
