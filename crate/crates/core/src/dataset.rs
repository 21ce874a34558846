//! Class taxonomy, patch extraction, augmentation and the train/validation
//! split.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{
    channel_slice, channel_stack, crop, mirror_index, read_raster, write_raster, ChannelRole, MultiRaster,
    RasterError,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("source {width}x{height} is smaller than the {patch}px patch")]
    TooSmall { width: u32, height: u32, patch: u32 },
    #[error("label value {0} is not a class id")]
    LabelOutOfRange(f32),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassId {
    Shadow = 0,
    Ground = 1,
    Healthy = 2,
    Diseased = 3,
}

impl ClassId {
    pub const ALL: [ClassId; 4] = [ClassId::Shadow, ClassId::Ground, ClassId::Healthy, ClassId::Diseased];
    pub const COUNT: usize = 4;

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Class of a label-plane value, which must be an exact integer 0..=3.
    pub fn from_value(v: f32) -> Result<Self> {
        if v.fract() == 0.0 && (0.0..4.0).contains(&v) {
            Ok(Self::ALL[v as usize])
        } else {
            Err(DatasetError::LabelOutOfRange(v))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Shadow => "shadow",
            ClassId::Ground => "ground",
            ClassId::Healthy => "healthy",
            ClassId::Diseased => "diseased",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel layout of scene and sample planes.
pub const PLANE_ROLES: [ChannelRole; 5] =
    [ChannelRole::Red, ChannelRole::Green, ChannelRole::Blue, ChannelRole::Nir, ChannelRole::Depth];

/// Which augmentation produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugTag {
    Original,
    /// Counter-clockwise rotation in whole degrees.
    Rotate(u16),
    /// Scale factor in percent.
    Scale(u16),
    /// Brightness factor in percent.
    Brightness(u16),
}

impl fmt::Display for AugTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugTag::Original => write!(f, "orig"),
            AugTag::Rotate(d) => write!(f, "rot{d}"),
            AugTag::Scale(p) => write!(f, "scale{p}"),
            AugTag::Brightness(p) => write!(f, "bright{p}"),
        }
    }
}

impl FromStr for AugTag {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| rest.parse::<u16>().map_err(|_| DatasetError::Manifest(format!("bad tag {s:?}")));
        if s == "orig" {
            Ok(AugTag::Original)
        } else if let Some(r) = s.strip_prefix("rot") {
            Ok(AugTag::Rotate(num(r)?))
        } else if let Some(r) = s.strip_prefix("scale") {
            Ok(AugTag::Scale(num(r)?))
        } else if let Some(r) = s.strip_prefix("bright") {
            Ok(AugTag::Brightness(num(r)?))
        } else {
            Err(DatasetError::Manifest(format!("bad tag {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub offset_x: u32,
    pub offset_y: u32,
    pub aug: AugTag,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.offset_x, self.offset_y, self.aug)
    }
}

/// The co-registered source: 5 planes (R, G, B, NIR, depth) and labels.
/// Depth is stored as {0, 255}.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceScene {
    pub planes: MultiRaster,
    pub labels: MultiRaster,
}

impl SourceScene {
    /// Stacks RGB, NIR and a {0,1} depth mask; the mask is rescaled to {0,255}.
    pub fn new(rgb: &MultiRaster, nir: &MultiRaster, depth_mask: &MultiRaster, labels: &MultiRaster) -> Result<Self> {
        let depth = depth_mask.map(|v| if v > 0.5 { 255.0 } else { 0.0 })?;
        let planes = channel_stack(&[rgb, nir, &depth])?.with_roles(PLANE_ROLES.to_vec())?;
        if !planes.same_dims(labels) || labels.channels() != 1 {
            return Err(RasterError::DimensionMismatch("labels do not match the scene".into()).into());
        }
        for &v in labels.data() {
            ClassId::from_value(v)?;
        }
        Ok(Self { planes, labels: labels.clone().with_roles(vec![ChannelRole::Label])? })
    }
}

/// One training patch: 5 planes plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub planes: MultiRaster,
    pub labels: MultiRaster,
    pub provenance: Provenance,
}

impl Sample {
    pub fn size(&self) -> (u32, u32) {
        (self.planes.width(), self.planes.height())
    }

    pub fn rgb(&self) -> MultiRaster {
        channel_slice(&self.planes, &ChannelRole::RGB).expect("sample has RGB")
    }

    pub fn nir(&self) -> MultiRaster {
        channel_slice(&self.planes, &[ChannelRole::Nir]).expect("sample has NIR")
    }

    pub fn depth(&self) -> MultiRaster {
        channel_slice(&self.planes, &[ChannelRole::Depth]).expect("sample has depth")
    }

    pub fn label_ids(&self) -> Vec<u8> {
        self.labels.data().iter().map(|&v| v as u8).collect()
    }
}

pub fn patch_stride(patch: u32, overlap: f64) -> u32 {
    ((patch as f64 * (1.0 - overlap)).round() as u32).max(1)
}

/// Windows per axis times windows per axis for a `width × height` source.
pub fn patch_count(width: u32, height: u32, patch: u32, overlap: f64) -> usize {
    if width < patch || height < patch {
        return 0;
    }
    let s = patch_stride(patch, overlap);
    (((height - patch) / s + 1) * ((width - patch) / s + 1)) as usize
}

/// Row-major sliding windows of `patch` pixels with the given overlap fraction.
pub fn extract_patches(src: &SourceScene, patch: u32, overlap: f64) -> Result<Vec<Sample>> {
    if !(0.0..1.0).contains(&overlap) || patch == 0 {
        return Err(DatasetError::Invalid(format!("patch {patch}, overlap {overlap}")));
    }
    let (w, h) = (src.planes.width(), src.planes.height());
    if w < patch || h < patch {
        return Err(DatasetError::TooSmall { width: w, height: h, patch });
    }
    let s = patch_stride(patch, overlap);
    let mut out = Vec::with_capacity(patch_count(w, h, patch, overlap));
    for y in (0..=h - patch).step_by(s as usize) {
        for x in (0..=w - patch).step_by(s as usize) {
            out.push(sample_at(src, x, y, patch)?);
        }
    }
    Ok(out)
}

fn sample_at(src: &SourceScene, x: u32, y: u32, patch: u32) -> Result<Sample> {
    Ok(Sample {
        planes: crop(&src.planes, x, y, patch, patch)?,
        labels: crop(&src.labels, x, y, patch, patch)?,
        provenance: Provenance { offset_x: x, offset_y: y, aug: AugTag::Original },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub translation_overlap: f64,
    pub rotations: Vec<u16>,
    pub scales: Vec<u16>,
    pub brightness: Vec<u16>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { translation_overlap: 0.5, rotations: vec![30, 60, 90], scales: vec![80, 120], brightness: vec![95, 105] }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self { translation_overlap: 0.5, rotations: vec![], scales: vec![], brightness: vec![] }
    }

    pub fn variants(&self) -> usize {
        1 + self.rotations.len() + self.scales.len() + self.brightness.len()
    }
}

/// Resamples every plane through the inverse map `f(out) -> src`. RGB and
/// NIR are bilinear, depth and labels nearest; sources outside the patch are
/// mirrored back in.
fn resample(s: &Sample, f: impl Fn(f64, f64) -> (f64, f64), aug: AugTag) -> Result<Sample> {
    let (w, h) = s.size();
    let c = s.planes.channels();
    let src = s.planes.data();
    let lab = s.labels.data();
    let mut planes = Vec::with_capacity(src.len());
    let mut labels = Vec::with_capacity(lab.len());
    let at = |x: i64, y: i64| mirror_index(y, h as usize) * w as usize + mirror_index(x, w as usize);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = f(x as f64, y as f64);
            let near = at(sx.round() as i64, sy.round() as i64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let corners = [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)];
            for (ch, role) in s.planes.roles().iter().enumerate() {
                let v = if matches!(role, ChannelRole::Depth | ChannelRole::Label) {
                    src[near * c + ch]
                } else {
                    let g = |i: usize| src[corners[i] * c + ch];
                    let top = g(0) + (g(1) - g(0)) * fx;
                    let bot = g(2) + (g(3) - g(2)) * fx;
                    top + (bot - top) * fy
                };
                planes.push(v);
            }
            labels.push(lab[near]);
        }
    }
    Ok(Sample {
        planes: MultiRaster::new(w, h, s.planes.roles().to_vec(), planes)?,
        labels: MultiRaster::new(w, h, vec![ChannelRole::Label], labels)?,
        provenance: Provenance { aug, ..s.provenance },
    })
}

/// Exact counter-clockwise quarter turns of a square patch.
fn quarter_turns(s: &Sample, turns: u16) -> Result<Sample> {
    let (w, h) = s.size();
    let n = w as f64 - 1.0;
    let aug = AugTag::Rotate(turns * 90);
    if w != h {
        return Err(DatasetError::Invalid(format!("quarter turn of non-square {w}x{h} patch")));
    }
    resample(
        s,
        |x, y| match turns % 4 {
            0 => (x, y),
            1 => (n - y, x),
            2 => (n - x, n - y),
            _ => (y, n - x),
        },
        aug,
    )
}

pub fn rotate(s: &Sample, degrees: u16) -> Result<Sample> {
    if degrees % 90 == 0 {
        return quarter_turns(s, degrees / 90);
    }
    let (w, h) = s.size();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sn, cs) = (degrees as f64).to_radians().sin_cos();
    // the output is the input turned counter-clockwise on screen (y down),
    // so the source is the output turned clockwise
    resample(
        s,
        |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            (cx + cs * dx - sn * dy, cy + sn * dx + cs * dy)
        },
        AugTag::Rotate(degrees),
    )
}

/// Zooms about the centre by `percent / 100`, keeping the patch size:
/// larger factors crop, smaller ones mirror-pad.
pub fn rescale(s: &Sample, percent: u16) -> Result<Sample> {
    if percent == 0 {
        return Err(DatasetError::Invalid("zero scale".into()));
    }
    let (w, h) = s.size();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let k = 100.0 / percent as f64;
    resample(s, |x, y| (cx + (x - cx) * k, cy + (y - cy) * k), AugTag::Scale(percent))
}

/// Multiplies RGB and NIR by `percent / 100`, clamped to [0, 255]; depth
/// and labels are untouched.
pub fn brighten(s: &Sample, percent: u16) -> Result<Sample> {
    let f = percent as f32 / 100.0;
    let c = s.planes.channels();
    let roles = s.planes.roles().to_vec();
    let data = s
        .planes
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match roles[i % c] {
            ChannelRole::Depth | ChannelRole::Label => v,
            _ => (v * f).clamp(0.0, 255.0),
        })
        .collect();
    let (w, h) = s.size();
    Ok(Sample {
        planes: MultiRaster::new(w, h, roles, data)?,
        labels: s.labels.clone(),
        provenance: Provenance { aug: AugTag::Brightness(percent), ..s.provenance },
    })
}

/// The sample followed by each rotation, rescale and brightness variant.
/// Variants are applied to the original only, never composed.
pub fn augment(s: &Sample, policy: &AugmentationPolicy) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(policy.variants());
    out.push(s.clone());
    for &d in &policy.rotations {
        out.push(rotate(s, d)?);
    }
    for &p in &policy.scales {
        out.push(rescale(s, p)?);
    }
    for &b in &policy.brightness {
        out.push(brighten(s, b)?);
    }
    Ok(out)
}

/// Re-creates one sample from its provenance.
pub fn materialize(src: &SourceScene, p: &Provenance, patch: u32) -> Result<Sample> {
    let base = sample_at(src, p.offset_x, p.offset_y, patch)?;
    match p.aug {
        AugTag::Original => Ok(base),
        AugTag::Rotate(d) => rotate(&base, d),
        AugTag::Scale(s) => rescale(&base, s),
        AugTag::Brightness(b) => brighten(&base, b),
    }
}

/// Group-aware split. Patches sharing a source offset form a group; `guard`
/// holds training-side patches that overlap a validation patch and are
/// therefore held out of both sets.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub guard: Vec<Sample>,
}

fn overlaps(a: &Provenance, b: &Provenance, patch: u32) -> bool {
    a.offset_x.abs_diff(b.offset_x) < patch && a.offset_y.abs_diff(b.offset_y) < patch
}

/// Validation takes a contiguous run (in row-major offset order) of
/// `round(val_fraction · groups)` groups starting at a seeded position.
pub fn split(samples: Vec<Sample>, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(DatasetError::Invalid(format!("val fraction {val_fraction} outside (0, 0.5)")));
    }
    let patch = samples.first().map(|s| s.size().0.max(s.size().1)).unwrap_or(0);
    let mut groups: BTreeMap<(u32, u32), Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.provenance.offset_y, s.provenance.offset_x)).or_default().push(s);
    }
    let n = groups.len();
    let n_val = ((val_fraction * n as f64).round() as usize).max(1);
    if n < 2 || n_val >= n {
        return Err(DatasetError::TooFewSamples(format!("{n} groups cannot give {n_val} validation groups")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=n - n_val);
    let mut out = Split::default();
    let mut rest = Vec::new();
    for (i, (_, g)) in groups.into_iter().enumerate() {
        if (start..start + n_val).contains(&i) {
            out.val.extend(g);
        } else {
            rest.push(g);
        }
    }
    let val_offsets: Vec<Provenance> = out.val.iter().map(|s| s.provenance).collect();
    for g in rest {
        let p = g[0].provenance;
        if val_offsets.iter().any(|v| overlaps(&p, v, patch)) {
            out.guard.extend(g);
        } else {
            out.train.extend(g);
        }
    }
    Ok(out)
}

/// Pixel count per class.
pub fn class_histogram(labels: &MultiRaster) -> Result<[u64; 4]> {
    let mut h = [0u64; 4];
    for &v in labels.data() {
        h[ClassId::from_value(v)? as usize] += 1;
    }
    Ok(h)
}

pub const MANIFEST_FILE: &str = "dataset.txt";
pub const SCENE_FILE: &str = "scene.vddr";
pub const LABELS_FILE: &str = "labels.vddr";

/// Patch geometry recorded in the manifest header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGeometry {
    pub patch: u32,
    pub overlap: f64,
}

pub fn manifest_text(geom: PatchGeometry, provenance: &[Provenance]) -> String {
    let mut s = format!("# patch={} overlap={}\n", geom.patch, geom.overlap);
    for p in provenance {
        s.push_str(&format!("{p}\n"));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<(PatchGeometry, Vec<Provenance>)> {
    let mut geom = None;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('#') {
            let mut patch = None;
            let mut overlap = None;
            for kv in h.split_whitespace() {
                match kv.split_once('=') {
                    Some(("patch", v)) => patch = v.parse().ok(),
                    Some(("overlap", v)) => overlap = v.parse().ok(),
                    _ => {}
                }
            }
            if let (Some(patch), Some(overlap)) = (patch, overlap) {
                geom = Some(PatchGeometry { patch, overlap });
            }
            continue;
        }
        let bad = || DatasetError::Manifest(format!("line {}: {line:?}", ln + 1));
        let mut it = line.split(',');
        let (Some(x), Some(y), Some(t), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        out.push(Provenance {
            offset_x: x.trim().parse().map_err(|_| bad())?,
            offset_y: y.trim().parse().map_err(|_| bad())?,
            aug: t.trim().parse()?,
        });
    }
    let geom = geom.ok_or_else(|| DatasetError::Manifest("missing `# patch=.. overlap=..` header".into()))?;
    Ok((geom, out))
}

/// Writes `scene.vddr`, `labels.vddr` and `dataset.txt` into `dir`.
pub fn write_dataset_dir(dir: &Path, src: &SourceScene, geom: PatchGeometry, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_raster(&src.planes, dir.join(SCENE_FILE))?;
    write_raster(&src.labels, dir.join(LABELS_FILE))?;
    let prov: Vec<Provenance> = samples.iter().map(|s| s.provenance).collect();
    std::fs::write(dir.join(MANIFEST_FILE), manifest_text(geom, &prov))?;
    Ok(())
}

/// Reads a dataset directory and re-materializes every listed sample.
pub fn read_dataset_dir(dir: &Path) -> Result<(SourceScene, PatchGeometry, Vec<Sample>)> {
    let planes = read_raster(dir.join(SCENE_FILE))?;
    let labels = read_raster(dir.join(LABELS_FILE))?;
    if planes.roles() != PLANE_ROLES || !planes.same_dims(&labels) || labels.channels() != 1 {
        return Err(DatasetError::Manifest("scene.vddr must hold R,G,B,NIR,Depth matching labels.vddr".into()));
    }
    let src = SourceScene { planes, labels };
    let (geom, prov) = parse_manifest(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let samples = prov.iter().map(|p| materialize(&src, p, geom.patch)).collect::<Result<Vec<_>>>()?;
    Ok((src, geom, samples))
}
