//! Georeferenced rasters on regular lat/lon grids.
//!
//! A [`GeoGrid`] stores `height × width × channels` values in row-major
//! `(row, column, channel)` order together with a per-pixel validity mask.
//! Row 0 is the northern edge; `lat0`/`lon0` locate the north-west corner of
//! pixel `(0, 0)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RATIO_TOL: f64 = 1e-6;

/// Placement and size of a raster, without its values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub lat0: f64,
    pub lon0: f64,
    pub res: f64,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    /// Builds a geometry that must fit on the globe.
    pub fn new(lat0: f64, lon0: f64, res: f64, height: usize, width: usize) -> Result<Self> {
        let g = Geometry::unbounded(lat0, lon0, res, height, width)?;
        if height as f64 * res > 180.0 + 1e-9 {
            return Err(Error::invalid(format!("{height} rows at {res}° exceed 180°")));
        }
        if width as f64 * res > 360.0 + 1e-9 {
            return Err(Error::invalid(format!("{width} columns at {res}° exceed 360°")));
        }
        Ok(g)
    }

    /// Same as [`Geometry::new`] but allows extents past the globe, as
    /// needed for grids carrying wrapped context columns.
    pub fn unbounded(lat0: f64, lon0: f64, res: f64, height: usize, width: usize) -> Result<Self> {
        if !(res > 0.0) || !res.is_finite() {
            return Err(Error::invalid(format!("resolution must be positive, got {res}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("empty grid {height}×{width}")));
        }
        Ok(Geometry { lat0, lon0, res, height, width })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Latitude and longitude of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.lat0 - (row as f64 + 0.5) * self.res,
            self.lon0 + (col as f64 + 0.5) * self.res,
        )
    }

    /// Equality up to floating-point noise in the georeferencing.
    pub fn matches(&self, other: &Geometry) -> bool {
        let tol = 1e-9 * self.res.max(1.0);
        self.height == other.height
            && self.width == other.width
            && (self.res - other.res).abs() <= tol
            && (self.lat0 - other.lat0).abs() <= 1e-6
            && (self.lon0 - other.lon0).abs() <= 1e-6
    }
}

/// A multi-channel raster with a validity mask (`true` = observed).
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGrid {
    geom: Geometry,
    channels: usize,
    data: Vec<f32>,
    mask: Vec<bool>,
}

impl GeoGrid {
    pub fn zeros(geom: Geometry, channels: usize) -> Self {
        Self::filled(geom, channels, 0.0)
    }

    pub fn filled(geom: Geometry, channels: usize, value: f32) -> Self {
        GeoGrid {
            geom,
            channels,
            data: vec![value; geom.pixels() * channels],
            mask: vec![true; geom.pixels()],
        }
    }

    pub fn from_parts(geom: Geometry, channels: usize, data: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("grid needs at least one channel"));
        }
        if data.len() != geom.pixels() * channels {
            return Err(Error::shape(format!(
                "data has {} values, expected {}×{}×{}",
                data.len(),
                geom.height,
                geom.width,
                channels
            )));
        }
        if mask.len() != geom.pixels() {
            return Err(Error::shape(format!(
                "mask has {} entries, expected {}",
                mask.len(),
                geom.pixels()
            )));
        }
        Ok(GeoGrid { geom, channels, data, mask })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn height(&self) -> usize {
        self.geom.height
    }

    pub fn width(&self) -> usize {
        self.geom.width
    }

    pub fn res(&self) -> f64 {
        self.geom.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    pub fn into_parts(self) -> (Geometry, usize, Vec<f32>, Vec<bool>) {
        (self.geom, self.channels, self.data, self.mask)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.geom.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.geom.width + col]
    }

    /// Values of one pixel across channels.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes the sentinel value 0 into every masked pixel.
    pub fn zero_invalid(&mut self) {
        let c = self.channels;
        for (p, &valid) in self.mask.iter().enumerate() {
            if !valid {
                self.data[p * c..(p + 1) * c].fill(0.0);
            }
        }
    }

    /// Copies channel `ch` into a single-channel grid with the same mask.
    pub fn channel(&self, ch: usize) -> GeoGrid {
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        GeoGrid { geom: self.geom, channels: 1, data, mask: self.mask.clone() }
    }

    /// Stacks grids along the channel axis. A pixel of the result is valid
    /// when any input marks it valid.
    pub fn concat_channels(grids: &[&GeoGrid]) -> Result<GeoGrid> {
        let first = grids.first().ok_or_else(|| Error::shape("nothing to concatenate"))?;
        let geom = first.geom;
        for g in grids {
            if !g.geom.matches(&geom) {
                return Err(Error::Geometry(format!("{:?} vs {:?}", g.geom, geom)));
            }
        }
        let channels: usize = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(geom.pixels() * channels);
        let mut mask = vec![false; geom.pixels()];
        for p in 0..geom.pixels() {
            for g in grids {
                data.extend_from_slice(&g.data[p * g.channels..(p + 1) * g.channels]);
                mask[p] |= g.mask[p];
            }
        }
        Ok(GeoGrid { geom, channels, data, mask })
    }

    /// Copies a rectangular window; the window's georeferencing follows.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<GeoGrid> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::shape(format!(
                "crop {height}×{width} at ({top},{left}) outside {}×{}",
                self.height(),
                self.width()
            )));
        }
        let geom = Geometry::unbounded(
            self.geom.lat0 - top as f64 * self.geom.res,
            self.geom.lon0 + left as f64 * self.geom.res,
            self.geom.res,
            height,
            width,
        )?;
        let mut out = GeoGrid::zeros(geom, self.channels);
        for r in 0..height {
            let src = self.index(top + r, left, 0);
            let dst = out.index(r, 0, 0);
            let n = width * self.channels;
            out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
            for c in 0..width {
                out.mask[r * width + c] = self.is_valid(top + r, left + c);
            }
        }
        Ok(out)
    }
}

/// Integer `n` with `a / b == n`, when one exists.
fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= RATIO_TOL * n {
        Some(n as usize)
    } else {
        None
    }
}

/// Changes resolution by an integer factor.
///
/// Going finer replicates every source pixel into an `n × n` block. Going
/// coarser averages the valid pixels of each block; a block with no valid
/// pixel becomes masked with value 0.
pub fn resample(g: &GeoGrid, target_res: f64) -> Result<GeoGrid> {
    let ratio_err = || Error::Ratio { source_res: g.res(), target: target_res };
    if !(target_res > 0.0) {
        return Err(ratio_err());
    }
    if let Some(n) = integer_ratio(g.res(), target_res) {
        if n == 1 {
            return Ok(g.clone());
        }
        return Ok(upsample(g, n, target_res));
    }
    if let Some(n) = integer_ratio(target_res, g.res()) {
        return downsample(g, n, target_res);
    }
    Err(ratio_err())
}

fn upsample(g: &GeoGrid, n: usize, res: f64) -> GeoGrid {
    let geom = Geometry { res, height: g.height() * n, width: g.width() * n, ..g.geom };
    let c = g.channels;
    let mut out = GeoGrid::zeros(geom, c);
    for r in 0..geom.height {
        for col in 0..geom.width {
            let (sr, sc) = (r / n, col / n);
            let dst = out.index(r, col, 0);
            out.data[dst..dst + c].copy_from_slice(g.pixel(sr, sc));
            out.mask[r * geom.width + col] = g.is_valid(sr, sc);
        }
    }
    out
}

fn downsample(g: &GeoGrid, n: usize, res: f64) -> Result<GeoGrid> {
    if g.height() % n != 0 || g.width() % n != 0 {
        return Err(Error::shape(format!(
            "{}×{} grid is not divisible into {n}×{n} blocks",
            g.height(),
            g.width()
        )));
    }
    let geom = Geometry { res, height: g.height() / n, width: g.width() / n, ..g.geom };
    let c = g.channels;
    let mut out = GeoGrid::zeros(geom, c);
    let mut acc = vec![0f64; c];
    for r in 0..geom.height {
        for col in 0..geom.width {
            acc.fill(0.0);
            let mut count = 0usize;
            for dy in 0..n {
                for dx in 0..n {
                    let (sr, sc) = (r * n + dy, col * n + dx);
                    if g.is_valid(sr, sc) {
                        count += 1;
                        for (a, &v) in acc.iter_mut().zip(g.pixel(sr, sc)) {
                            *a += v as f64;
                        }
                    }
                }
            }
            let dst = out.index(r, col, 0);
            if count > 0 {
                for (k, a) in acc.iter().enumerate() {
                    out.data[dst + k] = (a / count as f64) as f32;
                }
            } else {
                out.mask[r * geom.width + col] = false;
            }
        }
    }
    Ok(out)
}

/// Folds each `block × block` tile into channels.
///
/// Output channel `(dy * block + dx) * C + c` holds input channel `c` of the
/// tile pixel at offset `(dy, dx)`. An output pixel is valid only when its
/// whole tile is valid.
pub fn space_to_depth(g: &GeoGrid, block: usize) -> Result<GeoGrid> {
    if block == 0 {
        return Err(Error::shape("block size must be at least 1"));
    }
    if g.height() % block != 0 || g.width() % block != 0 {
        return Err(Error::shape(format!(
            "{}×{} grid is not divisible by block {block}",
            g.height(),
            g.width()
        )));
    }
    if block == 1 {
        return Ok(g.clone());
    }
    let geom = Geometry {
        res: g.res() * block as f64,
        height: g.height() / block,
        width: g.width() / block,
        ..g.geom
    };
    let c = g.channels;
    let oc = c * block * block;
    let mut out = GeoGrid::zeros(geom, oc);
    for r in 0..geom.height {
        for col in 0..geom.width {
            let mut valid = true;
            let base = out.index(r, col, 0);
            for dy in 0..block {
                for dx in 0..block {
                    let (sr, sc) = (r * block + dy, col * block + dx);
                    valid &= g.is_valid(sr, sc);
                    let dst = base + (dy * block + dx) * c;
                    out.data[dst..dst + c].copy_from_slice(g.pixel(sr, sc));
                }
            }
            out.mask[r * geom.width + col] = valid;
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`]. The mask of each folded pixel is copied to
/// every pixel of its tile.
pub fn depth_to_space(g: &GeoGrid, block: usize) -> Result<GeoGrid> {
    if block == 0 {
        return Err(Error::shape("block size must be at least 1"));
    }
    let bb = block * block;
    if g.channels % bb != 0 {
        return Err(Error::shape(format!(
            "{} channels not divisible by block² = {bb}",
            g.channels
        )));
    }
    if block == 1 {
        return Ok(g.clone());
    }
    let c = g.channels / bb;
    let geom = Geometry {
        res: g.res() / block as f64,
        height: g.height() * block,
        width: g.width() * block,
        ..g.geom
    };
    let mut out = GeoGrid::zeros(geom, c);
    for r in 0..g.height() {
        for col in 0..g.width() {
            let src = g.pixel(r, col);
            let valid = g.is_valid(r, col);
            for dy in 0..block {
                for dx in 0..block {
                    let (tr, tc) = (r * block + dy, col * block + dx);
                    let dst = out.index(tr, tc, 0);
                    let s = (dy * block + dx) * c;
                    out.data[dst..dst + c].copy_from_slice(&src[s..s + c]);
                    out.mask[tr * geom.width + tc] = valid;
                }
            }
        }
    }
    Ok(out)
}

/// Pads a raster cyclically: `lat_px` rows above and below, `lon_px`
/// columns left and right, each copied from the opposite edge. Longitude
/// wrapping is exact for a global raster; latitude wrapping only makes sense
/// on doubly periodic synthetic domains.
pub fn wrap_pad(g: &GeoGrid, lat_px: usize, lon_px: usize) -> Result<GeoGrid> {
    if lat_px > g.height() || lon_px > g.width() {
        return Err(Error::shape(format!(
            "padding ({lat_px},{lon_px}) exceeds grid {}×{}",
            g.height(),
            g.width()
        )));
    }
    let (h, w) = (g.height(), g.width());
    let geom = Geometry::unbounded(
        g.geom.lat0 + lat_px as f64 * g.res(),
        g.geom.lon0 - lon_px as f64 * g.res(),
        g.res(),
        h + 2 * lat_px,
        w + 2 * lon_px,
    )?;
    let c = g.channels;
    let mut out = GeoGrid::zeros(geom, c);
    for r in 0..geom.height {
        let sr = (r + h - lat_px) % h;
        for col in 0..geom.width {
            let sc = (col + w - lon_px) % w;
            let dst = out.index(r, col, 0);
            out.data[dst..dst + c].copy_from_slice(g.pixel(sr, sc));
            out.mask[r * geom.width + col] = g.is_valid(sr, sc);
        }
    }
    Ok(out)
}

/// A grid carrying `pad_lon_px` wrapped context columns on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGrid {
    pub inner: GeoGrid,
    pub pad_lon_px: usize,
}

impl PaddedGrid {
    pub fn width(&self) -> usize {
        self.inner.width() + 2 * self.pad_lon_px
    }

    /// Materializes the padded raster.
    pub fn padded(&self) -> GeoGrid {
        wrap_pad(&self.inner, 0, self.pad_lon_px).expect("pad validated at construction")
    }
}

/// Adds `degrees` of cyclically wrapped longitude context on both sides.
pub fn pad_longitude(g: &GeoGrid, degrees: f64) -> Result<PaddedGrid> {
    if degrees < 0.0 || !degrees.is_finite() {
        return Err(Error::invalid(format!("padding must be non-negative, got {degrees}°")));
    }
    let px = if degrees == 0.0 {
        0
    } else {
        integer_ratio(degrees, g.res()).ok_or(Error::Ratio { source_res: g.res(), target: degrees })?
    };
    if px > g.width() {
        return Err(Error::shape(format!("{px} px of padding exceeds width {}", g.width())));
    }
    Ok(PaddedGrid { inner: g.clone(), pad_lon_px: px })
}

/// Pixel count of `degrees` at resolution `res`, if integral.
pub fn degrees_to_pixels(degrees: f64, res: f64) -> Result<usize> {
    if degrees == 0.0 {
        return Ok(0);
    }
    integer_ratio(degrees, res).ok_or(Error::Ratio { source_res: res, target: degrees })
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    lat0: f64,
    lon0: f64,
    res: f64,
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
    mask: bool,
}

const DTYPE: &str = "f32le";

/// Serializes a grid: one line of JSON header, the little-endian `f32`
/// values, then (when any pixel is masked) the mask packed eight pixels per
/// byte, most significant bit first, `1` = valid.
pub fn write_grid<W: Write>(g: &GeoGrid, mut w: W) -> Result<()> {
    let has_mask = g.mask.iter().any(|&m| !m);
    let header = GridHeader {
        lat0: g.geom.lat0,
        lon0: g.geom.lon0,
        res: g.geom.res,
        height: g.geom.height,
        width: g.geom.width,
        channels: g.channels,
        dtype: DTYPE.to_string(),
        mask: has_mask,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(g.data.len() * 4);
    for v in &g.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    if has_mask {
        w.write_all(&pack_mask(&g.mask))?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<GeoGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header: GridHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let geom = Geometry::unbounded(header.lat0, header.lon0, header.res, header.height, header.width)?;
    let n = geom.pixels() * header.channels;
    let body = &bytes[nl + 1..];
    let mask_len = if header.mask { geom.pixels().div_ceil(8) } else { 0 };
    if body.len() != n * 4 + mask_len {
        return Err(Error::Format(format!(
            "body has {} bytes, expected {}",
            body.len(),
            n * 4 + mask_len
        )));
    }
    let data = body[..n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mask = if header.mask {
        unpack_mask(&body[n * 4..], geom.pixels())
    } else {
        vec![true; geom.pixels()]
    };
    GeoGrid::from_parts(geom, header.channels, data, mask)
}

pub fn save_grid(g: &GeoGrid, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_grid(g, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GeoGrid> {
    let file = std::fs::File::open(path)?;
    read_grid(std::io::BufReader::new(file))
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    mask.chunks(8)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, &m)| if m { byte | (0x80 >> i) } else { byte })
        })
        .collect()
}

fn unpack_mask(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}
