//! Spherical projection of point clouds into range images.
//!
//! A range image is an h x w grid where the column index encodes azimuth,
//! the row index encodes elevation, and each pixel stores the distance to
//! the nearest surface along that ray. 0 marks an invalid pixel. Because
//! azimuth maps linearly to columns, rotating the sensor about the vertical
//! axis shifts the image along columns without changing values, which is
//! the equivariance the rest of the pipeline builds on.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RIM1";

/// Minimum valid range in meters; filters sensor self-returns at the origin.
pub const MIN_RANGE: f64 = 1e-3;

#[derive(Debug)]
pub enum RangeImageError {
    InvalidParams(String),
    ZeroRangePoint,
    NonFinitePoint { index: usize },
    EmptyCloud,
    LengthMismatch { points: usize, intensities: usize },
    File(String),
}

impl fmt::Display for RangeImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangeImageError::InvalidParams(msg) => write!(f, "invalid projection params: {msg}"),
            RangeImageError::ZeroRangePoint => {
                write!(f, "cannot project a zero-range point: elevation is undefined")
            }
            RangeImageError::NonFinitePoint { index } => {
                write!(f, "point {index} has non-finite coordinates")
            }
            RangeImageError::EmptyCloud => write!(f, "point cloud is empty"),
            RangeImageError::LengthMismatch { points, intensities } => {
                write!(f, "{points} points but {intensities} intensities")
            }
            RangeImageError::File(msg) => write!(f, "range image file: {msg}"),
        }
    }
}

impl std::error::Error for RangeImageError {}

/// Geometry of the spherical projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionParams {
    /// Image width in columns (azimuth bins).
    pub width: usize,
    /// Image height in rows (elevation bins).
    pub height: usize,
    /// Maximum elevation angle in radians.
    pub fov_up: f64,
    /// Maximum depression angle in radians.
    pub fov_down: f64,
}

impl ProjectionParams {
    pub fn new(width: usize, height: usize, fov_up: f64, fov_down: f64) -> Result<Self, RangeImageError> {
        let p = Self { width, height, fov_up, fov_down };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RangeImageError> {
        if self.width < 1 || self.height < 1 {
            return Err(RangeImageError::InvalidParams(format!(
                "width and height must be at least 1, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.fov_up >= 0.0 && self.fov_down >= 0.0) {
            return Err(RangeImageError::InvalidParams(
                "field-of-view angles must be non-negative".to_string(),
            ));
        }
        if self.fov() <= 0.0 || !self.fov().is_finite() {
            return Err(RangeImageError::InvalidParams(
                "total vertical field of view must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Total vertical field of view.
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }
}

/// One projected point: its pixel and its range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit {
    pub u: usize,
    pub v: usize,
    pub range: f64,
}

/// Counters for points dropped during cloud projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub total: usize,
    pub projected: usize,
    /// Below the minimum valid range (includes exact zeros).
    pub dropped_near: usize,
    /// Row index outside the vertical field of view.
    pub dropped_fov: usize,
    /// Mapped to a pixel that already held a nearer return.
    pub occluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    intensities: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, RangeImageError> {
        Self::with_intensities(points, None)
    }

    pub fn with_intensities(
        points: Vec<[f64; 3]>,
        intensities: Option<Vec<f32>>,
    ) -> Result<Self, RangeImageError> {
        for (index, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(RangeImageError::NonFinitePoint { index });
            }
        }
        if let Some(ints) = &intensities {
            if ints.len() != points.len() {
                return Err(RangeImageError::LengthMismatch {
                    points: points.len(),
                    intensities: ints.len(),
                });
            }
        }
        Ok(Self { points, intensities })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn intensities(&self) -> Option<&[f32]> {
        self.intensities.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `p -> r * p + t` to every point.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: &[f64; 3]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let mut q = [0.0; 3];
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi = rotation[i][0] * p[0]
                        + rotation[i][1] * p[1]
                        + rotation[i][2] * p[2]
                        + translation[i];
                }
                q
            })
            .collect();
        Self { points, intensities: self.intensities.clone() }
    }
}

/// Row-major h x w grid of ranges in meters; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    params: ProjectionParams,
    pixels: Vec<f32>,
}

impl RangeImage {
    pub fn empty(params: ProjectionParams) -> Self {
        let len = params.height * params.width;
        Self { params, pixels: vec![0.0; len] }
    }

    pub fn from_pixels(params: ProjectionParams, pixels: Vec<f32>) -> Result<Self, RangeImageError> {
        params.validate()?;
        if pixels.len() != params.height * params.width {
            return Err(RangeImageError::InvalidParams(format!(
                "pixel buffer has {} values for a {}x{} image",
                pixels.len(),
                params.height,
                params.width
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(RangeImageError::InvalidParams(format!("pixel value {bad} is invalid")));
        }
        Ok(Self { params, pixels })
    }

    pub fn params(&self) -> &ProjectionParams {
        &self.params
    }

    pub fn width(&self) -> usize {
        self.params.width
    }

    pub fn height(&self) -> usize {
        self.params.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, v: usize, u: usize) -> f32 {
        self.pixels[v * self.params.width + u]
    }

    pub fn set(&mut self, v: usize, u: usize, range: f32) {
        self.pixels[v * self.params.width + u] = range;
    }

    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.get(v, u) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }

    /// Column `j` of the output is column `(j - k) mod w` of the input, so
    /// positive `k` moves content toward higher column indices.
    pub fn shift_columns(&self, k: i64) -> RangeImage {
        let w = self.params.width as i64;
        let h = self.params.height;
        let mut out = vec![0.0f32; self.pixels.len()];
        for row in 0..h {
            for j in 0..self.params.width {
                let src = (j as i64 - k).rem_euclid(w) as usize;
                out[row * self.params.width + j] = self.pixels[row * self.params.width + src];
            }
        }
        Self { params: self.params, pixels: out }
    }

    /// Builds the circularly extended grid for a kernel of width `kernel_w`
    /// and horizontal stride `stride_w`: the last `pad_left` columns are
    /// prepended and the first `pad_right` columns appended.
    pub fn circular_extend(&self, kernel_w: usize, stride_w: usize) -> Grid {
        let w = self.params.width;
        let h = self.params.height;
        let (left, right) = circular_pad_widths(kernel_w, stride_w, w);
        let cols = w + left + right;
        let mut data = vec![0.0f32; h * cols];
        for row in 0..h {
            for j in 0..cols {
                let src = (j as isize - left as isize).rem_euclid(w as isize) as usize;
                data[row * cols + j] = self.pixels[row * w + src];
            }
        }
        Grid { rows: h, cols, data }
    }
}

/// Plain row-major matrix returned by [`RangeImage::circular_extend`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Total horizontal padding split into a (left, right) pair.
///
/// The total is `max(K_w - S_w, 0)` when the width divides evenly by the
/// stride and `max(K_w - w mod S_w, 0)` otherwise; the left side takes the
/// floored half.
pub fn circular_pad_widths(kernel_w: usize, stride_w: usize, width: usize) -> (usize, usize) {
    assert!(stride_w >= 1, "stride must be positive");
    let pad_w = if width % stride_w == 0 {
        kernel_w.saturating_sub(stride_w)
    } else {
        kernel_w.saturating_sub(width % stride_w)
    };
    let left = pad_w / 2;
    (left, pad_w - left)
}

/// Maps a point to its pixel, or `None` when it falls outside the vertical
/// field of view or below the minimum range. A point at the exact origin has
/// no defined elevation and is an error.
pub fn project_point(
    p: [f64; 3],
    params: &ProjectionParams,
) -> Result<Option<PixelHit>, RangeImageError> {
    if !p.iter().all(|c| c.is_finite()) {
        return Err(RangeImageError::NonFinitePoint { index: 0 });
    }
    let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if range == 0.0 {
        return Err(RangeImageError::ZeroRangePoint);
    }
    if range < MIN_RANGE {
        return Ok(None);
    }
    let w = params.width as f64;
    let h = params.height as f64;
    // Two-argument arctangent: the full 360 degrees of azimuth must map onto
    // the column range, otherwise rear points collapse onto front columns.
    let azimuth = p[1].atan2(p[0]);
    let u_cont = 0.5 * w * (1.0 - azimuth / std::f64::consts::PI);
    let u = (u_cont.floor() as i64).rem_euclid(params.width as i64) as usize;

    let elevation = (p[2] / range).asin();
    let v_cont = h * (1.0 - (elevation + params.fov_up) / params.fov());
    let v = v_cont.floor();
    if v < 0.0 || v >= h {
        return Ok(None);
    }
    Ok(Some(PixelHit { u, v: v as usize, range }))
}

/// Projects every point, keeping the minimum range per pixel. Points that
/// fail the per-point checks are skipped and counted in the statistics.
pub fn project_cloud(
    cloud: &PointCloud,
    params: &ProjectionParams,
) -> Result<(RangeImage, ProjectionStats), RangeImageError> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(RangeImageError::EmptyCloud);
    }
    let mut image = RangeImage::empty(*params);
    let mut stats = ProjectionStats { total: cloud.len(), ..Default::default() };
    for &p in cloud.points() {
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if range < MIN_RANGE {
            stats.dropped_near += 1;
            continue;
        }
        match project_point(p, params)? {
            Some(hit) => {
                let cell = &mut image.pixels[hit.v * params.width + hit.u];
                let r = hit.range as f32;
                if *cell == 0.0 || r < *cell {
                    if *cell != 0.0 {
                        stats.occluded += 1;
                    }
                    *cell = r;
                    stats.projected += 1;
                } else {
                    stats.occluded += 1;
                }
            }
            None => stats.dropped_fov += 1,
        }
    }
    Ok((image, stats))
}

// ── File format ──────────────────────────────────────────────────────────

pub fn write_range_image<W: Write>(mut out: W, image: &RangeImage) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(image.params.height as u32).to_le_bytes())?;
    out.write_all(&(image.params.width as u32).to_le_bytes())?;
    out.write_all(&image.params.fov_up.to_le_bytes())?;
    out.write_all(&image.params.fov_down.to_le_bytes())?;
    for &p in &image.pixels {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_range_image<R: Read>(mut input: R) -> Result<RangeImage, RangeImageError> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(RangeImageError::File(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut input, &mut b4, "height")?;
    let height = u32::from_le_bytes(b4) as usize;
    read_exact(&mut input, &mut b4, "width")?;
    let width = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    read_exact(&mut input, &mut b8, "fov_up")?;
    let fov_up = f64::from_le_bytes(b8);
    read_exact(&mut input, &mut b8, "fov_down")?;
    let fov_down = f64::from_le_bytes(b8);
    let params = ProjectionParams::new(width, height, fov_up, fov_down)?;
    let mut pixels = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        read_exact(&mut input, &mut b4, "pixel")?;
        pixels.push(f32::from_le_bytes(b4));
    }
    RangeImage::from_pixels(params, pixels)
}

pub fn write_range_image_file(path: &Path, image: &RangeImage) -> io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_range_image(&mut writer, image)?;
    writer.flush()
}

pub fn read_range_image_file(path: &Path) -> Result<RangeImage, RangeImageError> {
    let file =
        File::open(path).map_err(|e| RangeImageError::File(format!("{}: {e}", path.display())))?;
    read_range_image(BufReader::new(file))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<(), RangeImageError> {
    input
        .read_exact(buf)
        .map_err(|e| RangeImageError::File(format!("truncated while reading {what}: {e}")))
}
