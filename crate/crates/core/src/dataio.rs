//! Scan and pose I/O plus deterministic synthetic worlds.
//!
//! Real data follows the KITTI odometry conventions: binary scans of
//! little-endian f32 (x, y, z, intensity) quadruples and text pose files
//! with one row-major 3x4 [R|t] matrix per line. Synthetic worlds ray-cast
//! simple primitives at the exact pixel-center angles of the projection
//! grid, so the generated cloud and image agree pixel for pixel and every
//! downstream oracle stays exact. Generated scans and poses are emitted in
//! the same KITTI conventions, so the pipeline consumes real and synthetic
//! data identically.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::overlap::{check_rotation, Pose};
use crate::rangeimage::{PointCloud, ProjectionParams, RangeImage, RangeImageError, MIN_RANGE};

#[derive(Debug)]
pub enum DataIoError {
    Io { path: String, source: io::Error },
    TruncatedScan { path: String, offset: u64 },
    MalformedPose { path: String, line: usize, detail: String },
    BadRotation { path: String, line: usize },
    WorldSpec(String),
    Projection(RangeImageError),
}

impl fmt::Display for DataIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataIoError::Io { path, source } => write!(f, "{path}: {source}"),
            DataIoError::TruncatedScan { path, offset } => {
                write!(f, "{path}: scan truncated at byte offset {offset} (records are 16 bytes)")
            }
            DataIoError::MalformedPose { path, line, detail } => {
                write!(f, "{path}: pose line {line}: {detail}")
            }
            DataIoError::BadRotation { path, line } => {
                write!(f, "{path}: pose line {line}: rotation is too far from orthonormal")
            }
            DataIoError::WorldSpec(msg) => write!(f, "world spec: {msg}"),
            DataIoError::Projection(e) => write!(f, "projection: {e}"),
        }
    }
}

impl std::error::Error for DataIoError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataIoError::Io { source, .. } => Some(source),
            DataIoError::Projection(e) => Some(e),
            _ => None,
        }
    }
}

impl From<RangeImageError> for DataIoError {
    fn from(e: RangeImageError) -> Self {
        DataIoError::Projection(e)
    }
}

fn io_err(path: &Path, source: io::Error) -> DataIoError {
    DataIoError::Io { path: path.display().to_string(), source }
}

// ── KITTI binary scans ───────────────────────────────────────────────────

/// Reads consecutive little-endian f32 (x, y, z, intensity) quadruples.
pub fn read_scan_bin(path: &Path) -> Result<PointCloud, DataIoError> {
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(DataIoError::TruncatedScan {
            path: path.display().to_string(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
        points.push([f(0) as f64, f(4) as f64, f(8) as f64]);
        intensities.push(f(12));
    }
    PointCloud::with_intensities(points, Some(intensities)).map_err(DataIoError::Projection)
}

pub fn write_scan_bin(path: &Path, cloud: &PointCloud) -> Result<(), DataIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let fallback = vec![0.0f32; cloud.len()];
    let intensities = cloud.intensities().unwrap_or(&fallback);
    for (p, &i) in cloud.points().iter().zip(intensities) {
        for &c in p {
            out.write_all(&(c as f32).to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
        out.write_all(&i.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

// ── KITTI pose files ─────────────────────────────────────────────────────

const POSE_CHECK_TOLERANCE: f64 = 1e-4;

/// Parses one row-major 3x4 [R|t] matrix per line. Rotations are checked to
/// a loose tolerance and snapped to the nearest rotation, so poses from
/// finite-precision files satisfy the strict orthonormality the rest of the
/// pipeline assumes.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>, DataIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut poses = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let values: Result<Vec<f64>, _> = trimmed.split_whitespace().map(str::parse).collect();
        let values = values.map_err(|e| DataIoError::MalformedPose {
            path: path.display().to_string(),
            line: lineno,
            detail: format!("{e}"),
        })?;
        if values.len() != 12 {
            return Err(DataIoError::MalformedPose {
                path: path.display().to_string(),
                line: lineno,
                detail: format!("expected 12 values, got {}", values.len()),
            });
        }
        let rotation = [
            [values[0], values[1], values[2]],
            [values[4], values[5], values[6]],
            [values[8], values[9], values[10]],
        ];
        let translation = [values[3], values[7], values[11]];
        if check_rotation(&rotation, POSE_CHECK_TOLERANCE).is_err() {
            return Err(DataIoError::BadRotation { path: path.display().to_string(), line: lineno });
        }
        let snapped = nearest_rotation(rotation);
        let pose = Pose::new(snapped, translation).map_err(|_| DataIoError::BadRotation {
            path: path.display().to_string(),
            line: lineno,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), DataIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for pose in poses {
        let r = pose.rotation();
        let t = pose.translation();
        let row = [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ];
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", fields.join(" ")).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Projects a near-rotation onto the nearest rotation matrix by iterating
/// `X <- (X + X^-T) / 2`, which converges quadratically for matrices this
/// close to orthonormal.
fn nearest_rotation(mut m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    for _ in 0..20 {
        let inv_t = match inverse_transpose(&m) {
            Some(it) => it,
            None => return m,
        };
        let mut next = [[0.0; 3]; 3];
        let mut delta = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (m[i][j] + inv_t[i][j]);
                delta = delta.max((next[i][j] - m[i][j]).abs());
            }
        }
        m = next;
        if delta < 1e-14 {
            break;
        }
    }
    m
}

fn inverse_transpose(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let cof = |r1: usize, c1: usize, r2: usize, c2: usize| m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
    // inverse^T = cofactor matrix / det
    Some([
        [cof(1, 1, 2, 2) / det, -cof(1, 0, 2, 2) / det, cof(1, 0, 2, 1) / det],
        [-cof(0, 1, 2, 2) / det, cof(0, 0, 2, 2) / det, -cof(0, 0, 2, 1) / det],
        [cof(0, 1, 1, 2) / det, -cof(0, 0, 1, 2) / det, cof(0, 0, 1, 1) / det],
    ])
}

// ── Synthetic worlds ─────────────────────────────────────────────────────

/// Solid placed in the world frame.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// Axis box rotated/translated by its pose; sizes are half extents.
    Box { pose: Pose, half_extents: [f64; 3] },
    /// Vertical-axis cylinder in its own frame, capped at +-half_height.
    Cylinder { pose: Pose, radius: f64, half_height: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Infinite horizontal plane at the given height.
    GroundPlane { z: f64 },
}

impl Primitive {
    /// Conservative bounding sphere, used for analytic footprint checks.
    pub fn bounding_sphere(&self) -> Option<([f64; 3], f64)> {
        match self {
            Primitive::Box { pose, half_extents } => {
                let r = (half_extents[0] * half_extents[0]
                    + half_extents[1] * half_extents[1]
                    + half_extents[2] * half_extents[2])
                    .sqrt();
                Some((*pose.translation(), r))
            }
            Primitive::Cylinder { pose, radius, half_height } => {
                let r = (radius * radius + half_height * half_height).sqrt();
                Some((*pose.translation(), r))
            }
            Primitive::Sphere { center, radius } => Some((*center, *radius)),
            Primitive::GroundPlane { .. } => None,
        }
    }

    /// Nearest positive ray parameter, if the ray hits.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        const T_MIN: f64 = 1e-6;
        match self {
            Primitive::GroundPlane { z } => {
                if dir[2].abs() < 1e-12 {
                    return None;
                }
                let t = (z - origin[2]) / dir[2];
                (t > T_MIN).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = [origin[0] - center[0], origin[1] - center[1], origin[2] - center[2]];
                let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sqrt_d = disc.sqrt();
                for t in [-b - sqrt_d, -b + sqrt_d] {
                    if t > T_MIN {
                        return Some(t);
                    }
                }
                None
            }
            Primitive::Box { pose, half_extents } => {
                let inv = pose.inverse();
                let o = inv.apply(origin);
                let d = rotate(inv.rotation(), dir);
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for axis in 0..3 {
                    let h = half_extents[axis];
                    if d[axis].abs() < 1e-12 {
                        if o[axis].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-h - o[axis]) / d[axis];
                    let t2 = (h - o[axis]) / d[axis];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_near = t_near.max(lo);
                    t_far = t_far.min(hi);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > T_MIN {
                    Some(t_near)
                } else if t_far > T_MIN {
                    Some(t_far)
                } else {
                    None
                }
            }
            Primitive::Cylinder { pose, radius, half_height } => {
                let inv = pose.inverse();
                let o = inv.apply(origin);
                let d = rotate(inv.rotation(), dir);
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > T_MIN && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                // Lateral surface.
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 1e-12 {
                    let b = o[0] * d[0] + o[1] * d[1];
                    let c = o[0] * o[0] + o[1] * o[1] - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sqrt_d = disc.sqrt();
                        for t in [(-b - sqrt_d) / a, (-b + sqrt_d) / a] {
                            let z = o[2] + t * d[2];
                            if z.abs() <= *half_height {
                                consider(t);
                            }
                        }
                    }
                }
                // Caps.
                if d[2].abs() > 1e-12 {
                    for z_cap in [-*half_height, *half_height] {
                        let t = (z_cap - o[2]) / d[2];
                        let x = o[0] + t * d[0];
                        let y = o[1] + t * d[1];
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Movable scene content with per-visit presence flags.
#[derive(Clone, Debug)]
pub struct MovablePrimitive {
    pub shape: Primitive,
    pub present: Vec<bool>,
}

impl MovablePrimitive {
    pub fn present_at(&self, visit: usize) -> bool {
        self.present.get(visit).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryPose {
    pub pose: Pose,
    pub visit: usize,
    /// Index of the first-visit pose at the same position, for revisits.
    pub revisit_of: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub statics: Vec<Primitive>,
    pub movables: Vec<MovablePrimitive>,
    pub trajectory: Vec<TrajectoryPose>,
    pub seed: u64,
    /// Sensor range cap; rays hitting beyond it read as misses.
    pub max_range: f64,
}

/// Generation parameters; a seed plus this struct fully determines a world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub static_boxes: usize,
    pub static_cylinders: usize,
    pub movable_count: usize,
    /// Loop path radius in meters.
    pub loop_radius: f64,
    /// Unique positions along the loop.
    pub positions: usize,
    /// Traversals of the loop; passes after the first are revisits.
    pub passes: usize,
    pub sensor_height: f64,
    /// Maximum sensor range in meters; farther hits read as misses.
    pub max_range: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            static_boxes: 7,
            static_cylinders: 5,
            movable_count: 4,
            loop_radius: 22.0,
            positions: 30,
            passes: 2,
            sensor_height: 1.5,
            max_range: 80.0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), DataIoError> {
        if self.positions == 0 || self.passes == 0 {
            return Err(DataIoError::WorldSpec("trajectory must be non-empty".to_string()));
        }
        if !(self.loop_radius > 0.0 && self.sensor_height.is_finite()) {
            return Err(DataIoError::WorldSpec("loop radius must be positive".to_string()));
        }
        if !(self.max_range > 0.0) {
            return Err(DataIoError::WorldSpec("max range must be positive".to_string()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + unit * (hi - lo)
}

/// Scatters primitives in an annulus around the loop, keeping a clear
/// corridor for the sensor path, and lays a looping trajectory with one
/// revisit pass per extra traversal.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld, DataIoError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let place = |rng: &mut ChaCha8Rng, spread: f64| -> Pose {
        let angle = uniform(rng, 0.0, std::f64::consts::TAU);
        let side = if rng.next_u64() % 2 == 0 { -1.0 } else { 1.0 };
        let radial = spec.loop_radius + side * uniform(rng, 3.0, spread);
        let yaw = uniform(rng, 0.0, std::f64::consts::TAU);
        Pose::from_yaw(yaw, [radial.max(1.0) * angle.cos(), radial.max(1.0) * angle.sin(), 0.0])
    };

    let mut statics = vec![Primitive::GroundPlane { z: 0.0 }];
    for _ in 0..spec.static_boxes {
        let pose = place(&mut rng, 14.0);
        let hx = uniform(&mut rng, 1.0, 4.0);
        let hy = uniform(&mut rng, 1.0, 4.0);
        let hz = uniform(&mut rng, 1.5, 5.5);
        let lifted = Pose::new(*pose.rotation(), [
            pose.translation()[0],
            pose.translation()[1],
            hz,
        ])
        .expect("yaw rotation is orthonormal");
        statics.push(Primitive::Box { pose: lifted, half_extents: [hx, hy, hz] });
    }
    for _ in 0..spec.static_cylinders {
        let pose = place(&mut rng, 14.0);
        let radius = uniform(&mut rng, 0.5, 1.8);
        let half_height = uniform(&mut rng, 1.5, 4.5);
        let lifted = Pose::new(*pose.rotation(), [
            pose.translation()[0],
            pose.translation()[1],
            half_height,
        ])
        .expect("yaw rotation is orthonormal");
        statics.push(Primitive::Cylinder { pose: lifted, radius, half_height });
    }

    let mut movables = Vec::with_capacity(spec.movable_count);
    for i in 0..spec.movable_count {
        let pose = place(&mut rng, 12.0);
        let hx = uniform(&mut rng, 0.5, 1.1);
        let hy = uniform(&mut rng, 0.5, 1.1);
        let hz = uniform(&mut rng, 0.5, 1.0);
        let lifted = Pose::new(*pose.rotation(), [
            pose.translation()[0],
            pose.translation()[1],
            hz,
        ])
        .expect("yaw rotation is orthonormal");
        let shape = Primitive::Box { pose: lifted, half_extents: [hx, hy, hz] };
        let mut present: Vec<bool> = (0..spec.passes).map(|_| rng.next_u64() % 2 == 0).collect();
        // Force a toggle so revisits never see an unchanged scene.
        if spec.passes > 1 && present.iter().all(|&p| p == present[0]) {
            let flip = i % spec.passes;
            present[flip] = !present[flip];
        }
        movables.push(MovablePrimitive { shape, present });
    }

    let mut trajectory = Vec::with_capacity(spec.positions * spec.passes);
    for pass in 0..spec.passes {
        for i in 0..spec.positions {
            let theta = std::f64::consts::TAU * i as f64 / spec.positions as f64;
            let position = [
                spec.loop_radius * theta.cos(),
                spec.loop_radius * theta.sin(),
                spec.sensor_height,
            ];
            // Heading along the tangent of the loop.
            let yaw = theta + std::f64::consts::FRAC_PI_2;
            trajectory.push(TrajectoryPose {
                pose: Pose::from_yaw(yaw, position),
                visit: pass,
                revisit_of: (pass > 0).then_some(i),
            });
        }
    }

    Ok(SyntheticWorld { statics, movables, trajectory, seed: spec.seed, max_range: spec.max_range })
}

impl SyntheticWorld {
    fn primitives_at(&self, visit: usize) -> impl Iterator<Item = &Primitive> {
        self.statics
            .iter()
            .chain(self.movables.iter().filter(move |m| m.present_at(visit)).map(|m| &m.shape))
    }

    /// Nearest hit distance for a world-frame ray at the given visit.
    pub fn cast_ray(&self, origin: [f64; 3], dir: [f64; 3], visit: usize) -> Option<f64> {
        let mut best: Option<f64> = None;
        for primitive in self.primitives_at(visit) {
            if let Some(t) = primitive.intersect(origin, dir) {
                if best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            }
        }
        best
    }
}

/// Sensor-frame ray direction through the center of pixel (v, u).
pub fn pixel_center_direction(v: usize, u: usize, params: &ProjectionParams) -> [f64; 3] {
    let w = params.width as f64;
    let h = params.height as f64;
    let azimuth = std::f64::consts::PI * (1.0 - 2.0 * (u as f64 + 0.5) / w);
    let elevation = params.fov() * (1.0 - (v as f64 + 0.5) / h) - params.fov_up;
    [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ]
}

/// Casts one ray per pixel center and returns the sensor-frame cloud with
/// its range image. Rays that miss all geometry leave invalid pixels; the
/// cloud and image are mutually consistent: projecting the cloud reproduces
/// the image exactly.
pub fn synth_scan(
    world: &SyntheticWorld,
    pose: &Pose,
    params: &ProjectionParams,
    visit: usize,
) -> Result<(PointCloud, RangeImage), DataIoError> {
    params.validate()?;
    let origin = *pose.translation();
    let mut points = Vec::new();
    let mut image = RangeImage::empty(*params);
    for v in 0..params.height {
        for u in 0..params.width {
            let dir_sensor = pixel_center_direction(v, u, params);
            let dir_world = rotate(pose.rotation(), dir_sensor);
            if let Some(t) = world.cast_ray(origin, dir_world, visit) {
                if t < MIN_RANGE || t > world.max_range {
                    continue;
                }
                let p = [t * dir_sensor[0], t * dir_sensor[1], t * dir_sensor[2]];
                // Store the recomputed norm, matching what projection does,
                // so the cloud -> image round trip is bit-exact.
                let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                image.set(v, u, range as f32);
                points.push(p);
            }
        }
    }
    let cloud = PointCloud::new(points).map_err(DataIoError::Projection)?;
    Ok((cloud, image))
}

// ── World spec file ──────────────────────────────────────────────────────

pub fn write_world_spec<W: Write>(mut out: W, spec: &WorldSpec) -> io::Result<()> {
    writeln!(out, "seed = {}", spec.seed)?;
    writeln!(out, "static_boxes = {}", spec.static_boxes)?;
    writeln!(out, "static_cylinders = {}", spec.static_cylinders)?;
    writeln!(out, "movable_count = {}", spec.movable_count)?;
    writeln!(out, "loop_radius = {}", spec.loop_radius)?;
    writeln!(out, "positions = {}", spec.positions)?;
    writeln!(out, "passes = {}", spec.passes)?;
    writeln!(out, "sensor_height = {}", spec.sensor_height)?;
    writeln!(out, "max_range = {}", spec.max_range)?;
    Ok(())
}

pub fn read_world_spec<R: BufRead>(input: R) -> Result<WorldSpec, DataIoError> {
    let mut spec = WorldSpec::default();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DataIoError::WorldSpec(format!("line {}: {e}", idx + 1)))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| DataIoError::WorldSpec(format!("line {}: expected key = value", idx + 1)))?;
        let key = key.trim();
        let value = value.trim();
        let bad = |e: &dyn fmt::Display| DataIoError::WorldSpec(format!("line {}: {key}: {e}", idx + 1));
        match key {
            "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
            "static_boxes" => spec.static_boxes = value.parse().map_err(|e| bad(&e))?,
            "static_cylinders" => spec.static_cylinders = value.parse().map_err(|e| bad(&e))?,
            "movable_count" => spec.movable_count = value.parse().map_err(|e| bad(&e))?,
            "loop_radius" => spec.loop_radius = value.parse().map_err(|e| bad(&e))?,
            "positions" => spec.positions = value.parse().map_err(|e| bad(&e))?,
            "passes" => spec.passes = value.parse().map_err(|e| bad(&e))?,
            "sensor_height" => spec.sensor_height = value.parse().map_err(|e| bad(&e))?,
            "max_range" => spec.max_range = value.parse().map_err(|e| bad(&e))?,
            other => return Err(DataIoError::WorldSpec(format!("unknown key {other}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn write_world_spec_file(path: &Path, spec: &WorldSpec) -> Result<(), DataIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write_world_spec(&mut out, spec).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn read_world_spec_file(path: &Path) -> Result<WorldSpec, DataIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_world_spec(BufReader::new(file))
}
