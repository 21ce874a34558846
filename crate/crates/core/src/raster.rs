//! Multichannel raster container and the VDDR file format.
//!
//! Every image-like quantity in the pipeline (RGB orthophotos, NIR, DSM,
//! depth masks, label maps, class probabilities) is a [`MultiRaster`]: a
//! row-major, channel-interleaved grid of `f32` with one [`ChannelRole`] per
//! channel.
//!
//! VDDR layout, little-endian:
//!
//! | field      | type      | notes                                    |
//! |------------|-----------|------------------------------------------|
//! | magic      | `[u8; 4]` | `b"VDDR"`                                |
//! | version    | `u16`     | `1`                                      |
//! | width      | `u32`     |                                          |
//! | height     | `u32`     |                                          |
//! | channels   | `u16`     |                                          |
//! | dtype      | `u8`      | `0` = f32, `1` = u8                      |
//! | flags      | `u8`      | bit 0: georef block, bit 1: role table   |
//! | georef     | `3 × f64` | origin_x, origin_y, pixel_size (if set)  |
//! | roles      | `channels × u8` | role codes (if set)                |
//! | payload    |           | row-major, channel-interleaved           |

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

pub const VDDR_MAGIC: &[u8; 4] = b"VDDR";
pub const VDDR_VERSION: u16 = 1;
/// Size of the fixed part of a VDDR header.
pub const VDDR_FIXED_HEADER: usize = 18;

const FLAG_GEOREF: u8 = 0b01;
const FLAG_ROLES: u8 = 0b10;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic: expected \"VDDR\"")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: usize },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unknown channel role code {0}")]
    UnknownRole(u8),
    #[error("non-finite value in payload at index {0}")]
    NonFinitePayload(usize),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("channel {0} not present")]
    MissingChannel(ChannelRole),
    #[error("window ({x0},{y0}) {w}x{h} out of bounds for {width}x{height} raster")]
    OutOfBounds {
        x0: u32,
        y0: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("png encoding failure: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Semantic tag attached to each raster channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Red,
    Green,
    Blue,
    Nir,
    Dsm,
    Depth,
    Label,
    /// Probability of the given class.
    Prob(u8),
    /// Channel read from a file without a role table.
    Unspecified,
}

impl ChannelRole {
    pub const RGB: [ChannelRole; 3] = [ChannelRole::Red, ChannelRole::Green, ChannelRole::Blue];

    pub fn code(self) -> u8 {
        match self {
            ChannelRole::Red => 0,
            ChannelRole::Green => 1,
            ChannelRole::Blue => 2,
            ChannelRole::Nir => 3,
            ChannelRole::Dsm => 4,
            ChannelRole::Depth => 5,
            ChannelRole::Label => 6,
            ChannelRole::Unspecified => 7,
            ChannelRole::Prob(c) => 16u8.saturating_add(c),
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => ChannelRole::Red,
            1 => ChannelRole::Green,
            2 => ChannelRole::Blue,
            3 => ChannelRole::Nir,
            4 => ChannelRole::Dsm,
            5 => ChannelRole::Depth,
            6 => ChannelRole::Label,
            7 => ChannelRole::Unspecified,
            c @ 16..=255 => ChannelRole::Prob(c - 16),
            c => return Err(RasterError::UnknownRole(c)),
        })
    }
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelRole::Red => f.write_str("R"),
            ChannelRole::Green => f.write_str("G"),
            ChannelRole::Blue => f.write_str("B"),
            ChannelRole::Nir => f.write_str("NIR"),
            ChannelRole::Dsm => f.write_str("DSM"),
            ChannelRole::Depth => f.write_str("Depth"),
            ChannelRole::Label => f.write_str("Label"),
            ChannelRole::Prob(c) => write!(f, "P{c}"),
            ChannelRole::Unspecified => f.write_str("?"),
        }
    }
}

/// Optional georeference: world coordinates of the top-left pixel and the
/// ground size of a pixel. Carried as inert metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoRef {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRaster {
    width: u32,
    height: u32,
    roles: Vec<ChannelRole>,
    data: Vec<f32>,
    georef: Option<GeoRef>,
}

impl MultiRaster {
    /// Builds a raster, checking dimensions, role count and finiteness.
    pub fn new(width: u32, height: u32, roles: Vec<ChannelRole>, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Invalid(format!("zero dimension {width}x{height}")));
        }
        if roles.is_empty() || roles.len() > u16::MAX as usize {
            return Err(RasterError::Invalid(format!("channel count {}", roles.len())));
        }
        let expected = width as usize * height as usize * roles.len();
        if data.len() != expected {
            return Err(RasterError::Invalid(format!(
                "data length {} != {width}x{height}x{}",
                data.len(),
                roles.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinitePayload(i));
        }
        Ok(Self { width, height, roles, data, georef: None })
    }

    pub fn filled(width: u32, height: u32, roles: Vec<ChannelRole>, value: f32) -> Result<Self> {
        let n = width as usize * height as usize * roles.len();
        Self::new(width, height, roles, vec![value; n])
    }

    /// Builds a raster from a per-pixel closure `f(x, y, channel)`.
    pub fn from_fn<F>(width: u32, height: u32, roles: Vec<ChannelRole>, mut f: F) -> Result<Self>
    where
        F: FnMut(u32, u32, usize) -> f32,
    {
        let c = roles.len();
        let mut data = Vec::with_capacity(width as usize * height as usize * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(x, y, ch));
                }
            }
        }
        Self::new(width, height, roles, data)
    }

    /// Single-channel raster from a plane.
    pub fn from_plane(width: u32, height: u32, role: ChannelRole, plane: Vec<f32>) -> Result<Self> {
        Self::new(width, height, vec![role], plane)
    }

    pub fn with_georef(mut self, georef: GeoRef) -> Self {
        self.georef = Some(georef);
        self
    }

    pub fn with_roles(mut self, roles: Vec<ChannelRole>) -> Result<Self> {
        if roles.len() != self.roles.len() {
            return Err(RasterError::DimensionMismatch(format!(
                "{} roles for {} channels",
                roles.len(),
                self.roles.len()
            )));
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.roles.len()
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    pub fn georef(&self) -> Option<GeoRef> {
        self.georef
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, c: usize) -> usize {
        (y as usize * self.width as usize + x as usize) * self.roles.len() + c
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    pub fn channel_index(&self, role: ChannelRole) -> Option<usize> {
        self.roles.iter().position(|&r| r == role)
    }

    /// Copies one channel out as a contiguous plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        let n = self.roles.len();
        self.data.iter().skip(c).step_by(n).copied().collect()
    }

    pub fn same_dims(&self, other: &MultiRaster) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every value, re-checking finiteness.
    pub fn map<F: FnMut(f32) -> f32>(&self, f: F) -> Result<MultiRaster> {
        let data = self.data.iter().copied().map(f).collect();
        let mut out = Self::new(self.width, self.height, self.roles.clone(), data)?;
        out.georef = self.georef;
        Ok(out)
    }
}

/// Returns the sub-grid starting at `(x0, y0)` of size `w × h`.
pub fn crop(r: &MultiRaster, x0: u32, y0: u32, w: u32, h: u32) -> Result<MultiRaster> {
    let oob = || RasterError::OutOfBounds { x0, y0, w, h, width: r.width, height: r.height };
    if w == 0 || h == 0 {
        return Err(oob());
    }
    let x1 = x0.checked_add(w).ok_or_else(oob)?;
    let y1 = y0.checked_add(h).ok_or_else(oob)?;
    if x1 > r.width || y1 > r.height {
        return Err(oob());
    }
    let c = r.channels();
    let mut data = Vec::with_capacity(w as usize * h as usize * c);
    for y in y0..y1 {
        let start = r.index(x0, y, 0);
        data.extend_from_slice(&r.data[start..start + w as usize * c]);
    }
    let mut out = MultiRaster::new(w, h, r.roles.clone(), data)?;
    out.georef = r.georef.map(|g| GeoRef {
        origin_x: g.origin_x + x0 as f64 * g.pixel_size,
        origin_y: g.origin_y - y0 as f64 * g.pixel_size,
        pixel_size: g.pixel_size,
    });
    Ok(out)
}

/// Concatenates channels of same-sized rasters, preserving role order.
pub fn channel_stack(rs: &[&MultiRaster]) -> Result<MultiRaster> {
    let first = rs
        .first()
        .ok_or_else(|| RasterError::DimensionMismatch("nothing to stack".into()))?;
    for r in rs {
        if !r.same_dims(first) {
            return Err(RasterError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                r.width, r.height, first.width, first.height
            )));
        }
    }
    let roles: Vec<ChannelRole> = rs.iter().flat_map(|r| r.roles.iter().copied()).collect();
    let mut data = Vec::with_capacity(first.pixel_count() * roles.len());
    for p in 0..first.pixel_count() {
        for r in rs {
            let c = r.channels();
            data.extend_from_slice(&r.data[p * c..(p + 1) * c]);
        }
    }
    let mut out = MultiRaster::new(first.width, first.height, roles, data)?;
    out.georef = first.georef;
    Ok(out)
}

/// Extracts the named channels, in the requested order.
pub fn channel_slice(r: &MultiRaster, roles: &[ChannelRole]) -> Result<MultiRaster> {
    let idx = roles
        .iter()
        .map(|&role| r.channel_index(role).ok_or(RasterError::MissingChannel(role)))
        .collect::<Result<Vec<_>>>()?;
    let c = r.channels();
    let mut data = Vec::with_capacity(r.pixel_count() * idx.len());
    for p in 0..r.pixel_count() {
        for &i in &idx {
            data.push(r.data[p * c + i]);
        }
    }
    let mut out = MultiRaster::new(r.width, r.height, roles.to_vec(), data)?;
    out.georef = r.georef;
    Ok(out)
}

/// Like [`channel_slice`] for a single channel index regardless of role.
pub fn channel_at(r: &MultiRaster, c: usize) -> Result<MultiRaster> {
    if c >= r.channels() {
        return Err(RasterError::Invalid(format!("channel {c} of {}", r.channels())));
    }
    let mut out = MultiRaster::new(r.width, r.height, vec![r.roles[c]], r.plane(c))?;
    out.georef = r.georef;
    Ok(out)
}

pub fn encode_raster(r: &MultiRaster) -> Vec<u8> {
    let c = r.channels();
    let mut buf = Vec::with_capacity(VDDR_FIXED_HEADER + 24 + c + r.data.len() * 4);
    buf.extend_from_slice(VDDR_MAGIC);
    buf.extend_from_slice(&VDDR_VERSION.to_le_bytes());
    buf.extend_from_slice(&r.width.to_le_bytes());
    buf.extend_from_slice(&r.height.to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.push(0);
    let mut flags = FLAG_ROLES;
    if r.georef.is_some() {
        flags |= FLAG_GEOREF;
    }
    buf.push(flags);
    if let Some(g) = r.georef {
        buf.extend_from_slice(&g.origin_x.to_le_bytes());
        buf.extend_from_slice(&g.origin_y.to_le_bytes());
        buf.extend_from_slice(&g.pixel_size.to_le_bytes());
    }
    buf.extend(r.roles.iter().map(|role| role.code()));
    for v in &r.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, expected_total: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(RasterError::TruncatedFile {
                expected: expected_total.max(self.pos + n),
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_raster(bytes: &[u8]) -> Result<MultiRaster> {
    if bytes.len() < 4 || &bytes[..4] != VDDR_MAGIC {
        return Err(RasterError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = u16::from_le_bytes(cur.take(2, VDDR_FIXED_HEADER)?.try_into().unwrap());
    if version != VDDR_VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let width = u32::from_le_bytes(cur.take(4, VDDR_FIXED_HEADER)?.try_into().unwrap());
    let height = u32::from_le_bytes(cur.take(4, VDDR_FIXED_HEADER)?.try_into().unwrap());
    let channels = u16::from_le_bytes(cur.take(2, VDDR_FIXED_HEADER)?.try_into().unwrap()) as usize;
    let dtype = cur.take(1, VDDR_FIXED_HEADER)?[0];
    let flags = cur.take(1, VDDR_FIXED_HEADER)?[0];
    let elem = match dtype {
        0 => 4,
        1 => 1,
        d => return Err(RasterError::UnsupportedDtype(d)),
    };
    let n = width as usize * height as usize * channels;
    let mut total = VDDR_FIXED_HEADER + n * elem;
    if flags & FLAG_GEOREF != 0 {
        total += 24;
    }
    if flags & FLAG_ROLES != 0 {
        total += channels;
    }
    let georef = if flags & FLAG_GEOREF != 0 {
        let mut f = [0f64; 3];
        for v in &mut f {
            *v = f64::from_le_bytes(cur.take(8, total)?.try_into().unwrap());
        }
        Some(GeoRef { origin_x: f[0], origin_y: f[1], pixel_size: f[2] })
    } else {
        None
    };
    let roles = if flags & FLAG_ROLES != 0 {
        cur.take(channels, total)?
            .iter()
            .map(|&c| ChannelRole::from_code(c))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![ChannelRole::Unspecified; channels]
    };
    let payload = cur.take(n * elem, total)?;
    if cur.pos != bytes.len() {
        return Err(RasterError::TrailingData { extra: bytes.len() - cur.pos });
    }
    let data: Vec<f32> = match dtype {
        0 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        _ => payload.iter().map(|&b| b as f32).collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(RasterError::NonFinitePayload(i));
    }
    let mut r = MultiRaster::new(width, height, roles, data)?;
    r.georef = georef;
    Ok(r)
}

pub fn read_raster<P: AsRef<Path>>(path: P) -> Result<MultiRaster> {
    decode_raster(&fs::read(path)?)
}

pub fn write_raster<P: AsRef<Path>>(r: &MultiRaster, path: P) -> Result<()> {
    fs::write(path, encode_raster(r))?;
    Ok(())
}

/// Float to 8-bit: clamp to `[0, 255]`, round half to even.
pub fn to_u8(v: f32) -> u8 {
    v.clamp(0.0, 255.0).round_ties_even() as u8
}

/// Writes one (grayscale) or three (RGB) channels as an 8-bit PNG.
pub fn export_png<P: AsRef<Path>>(r: &MultiRaster, channels: &[ChannelRole], path: P) -> Result<()> {
    let idx = channels
        .iter()
        .map(|&role| r.channel_index(role).ok_or(RasterError::MissingChannel(role)))
        .collect::<Result<Vec<_>>>()?;
    export_png_channels(r, &idx, path)
}

/// [`export_png`] selecting channels by index.
pub fn export_png_channels<P: AsRef<Path>>(r: &MultiRaster, idx: &[usize], path: P) -> Result<()> {
    let color = match idx.len() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(RasterError::Invalid(format!("png export needs 1 or 3 channels, got {n}"))),
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= r.channels()) {
        return Err(RasterError::Invalid(format!("channel {bad} of {}", r.channels())));
    }
    let c = r.channels();
    let mut pixels = Vec::with_capacity(r.pixel_count() * idx.len());
    for p in 0..r.pixel_count() {
        for &i in idx {
            pixels.push(to_u8(r.data[p * c + i]));
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), r.width, r.height);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}

/// Mirror (half-sample symmetric) index into `0..n`, valid for any offset.
#[inline]
pub fn mirror_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}
