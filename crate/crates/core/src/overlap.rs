//! Ground-truth overlap between scan pairs.
//!
//! The reference scan is reprojected into the query sensor frame and the
//! two range images are compared pixel by pixel: the overlap is the
//! fraction of mutually valid pixels whose range difference stays within a
//! threshold, normalized by the smaller valid-pixel count. This value in
//! [0, 1] is the regression target the descriptor network trains against.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::rangeimage::{project_cloud, PointCloud, ProjectionParams, ProjectionStats, RangeImage, RangeImageError};

/// A pair is a positive loop closure strictly above this overlap.
pub const LOOP_CLOSURE_THRESHOLD: f64 = 0.3;

/// Default range-agreement threshold in meters.
pub const DEFAULT_DELTA: f64 = 1.0;

/// Default pair gate in meters; pairs farther apart are treated as overlap 0.
pub const DEFAULT_GATE_RADIUS: f64 = 50.0;

#[derive(Debug)]
pub enum OverlapError {
    NotARotation { detail: String },
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    NoValidPixels,
    LengthMismatch { scans: usize, poses: usize },
    Projection(RangeImageError),
    LabelFile(String),
}

impl fmt::Display for OverlapError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OverlapError::NotARotation { detail } => {
                write!(f, "rotation matrix is not orthonormal with determinant +1: {detail}")
            }
            OverlapError::DimensionMismatch { left, right } => write!(
                f,
                "range images differ in size: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            OverlapError::NoValidPixels => {
                write!(f, "overlap is undefined when an image has no valid pixels")
            }
            OverlapError::LengthMismatch { scans, poses } => {
                write!(f, "{scans} scans but {poses} poses")
            }
            OverlapError::Projection(e) => write!(f, "projection failed: {e}"),
            OverlapError::LabelFile(msg) => write!(f, "label file: {msg}"),
        }
    }
}

impl std::error::Error for OverlapError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            OverlapError::Projection(e) => Some(e),
            _ => None,
        }
    }
}

impl From<RangeImageError> for OverlapError {
    fn from(e: RangeImageError) -> Self {
        OverlapError::Projection(e)
    }
}

const ORTHONORMALITY_TOLERANCE: f64 = 1e-6;

/// Rigid transform taking sensor-frame points into the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, OverlapError> {
        check_rotation(&rotation, ORTHONORMALITY_TOLERANCE)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    /// Rotation about the vertical axis by `yaw` radians.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self { rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], translation }
    }

    pub fn from_translation(translation: [f64; 3]) -> Self {
        Self { translation, ..Self::identity() }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Inverse transform; for a rotation the inverse is the transpose.
    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose { rotation: rt, translation: ti }
    }

    /// `self` after `other`: (self * other)(p) = self(other(p)).
    pub fn compose(&self, other: &Pose) -> Pose {
        let (a, b) = (&self.rotation, &other.rotation);
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        let translation = self.apply(other.translation);
        Pose { rotation, translation }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        let d = [
            self.translation[0] - other.translation[0],
            self.translation[1] - other.translation[1],
            self.translation[2] - other.translation[2],
        ];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

pub(crate) fn check_rotation(r: &[[f64; 3]; 3], tolerance: f64) -> Result<(), OverlapError> {
    // R^T R must be the identity.
    for i in 0..3 {
        for j in 0..3 {
            let dot = r[0][i] * r[0][j] + r[1][i] * r[1][j] + r[2][i] * r[2][j];
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > tolerance {
                return Err(OverlapError::NotARotation {
                    detail: format!("column dot ({i},{j}) = {dot}"),
                });
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 10.0 * tolerance {
        return Err(OverlapError::NotARotation { detail: format!("determinant {det}") });
    }
    Ok(())
}

/// Overlap regression target for one ordered scan pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapLabel {
    pub query_id: usize,
    pub reference_id: usize,
    pub overlap: f64,
}

/// Maps the reference cloud through `pose_q^-1 * pose_r` into the query
/// sensor frame and projects it there. The point cloud is used directly;
/// back-projecting the reference range image would quantize twice.
pub fn reproject(
    ref_cloud: &PointCloud,
    pose_q: &Pose,
    pose_r: &Pose,
    params: &ProjectionParams,
) -> Result<(RangeImage, ProjectionStats), OverlapError> {
    let rel = pose_q.inverse().compose(pose_r);
    let moved = ref_cloud.transformed(rel.rotation(), rel.translation());
    Ok(project_cloud(&moved, params)?)
}

/// Fraction of pixels valid in both images whose absolute range difference
/// is within `delta`, over the smaller of the two valid-pixel counts.
pub fn overlap(query: &RangeImage, reprojected_ref: &RangeImage, delta: f64) -> Result<f64, OverlapError> {
    if query.height() != reprojected_ref.height() || query.width() != reprojected_ref.width() {
        return Err(OverlapError::DimensionMismatch {
            left: (query.height(), query.width()),
            right: (reprojected_ref.height(), reprojected_ref.width()),
        });
    }
    let mut matching = 0usize;
    let mut valid_q = 0usize;
    let mut valid_r = 0usize;
    for (&a, &b) in query.pixels().iter().zip(reprojected_ref.pixels()) {
        if a > 0.0 {
            valid_q += 1;
        }
        if b > 0.0 {
            valid_r += 1;
        }
        if a > 0.0 && b > 0.0 && (a as f64 - b as f64).abs() <= delta {
            matching += 1;
        }
    }
    let denom = valid_q.min(valid_r);
    if denom == 0 {
        return Err(OverlapError::NoValidPixels);
    }
    Ok(matching as f64 / denom as f64)
}

/// True when the overlap marks a positive loop closure. The boundary value
/// itself is negative.
pub fn is_loop_closure(overlap: f64, threshold: f64) -> bool {
    overlap > threshold
}

/// Labels every ordered pair whose translation distance is within
/// `gate_radius`. Pairs beyond the gate are omitted; samplers treat them
/// as overlap 0.
pub fn label_sequence(
    scans: &[PointCloud],
    poses: &[Pose],
    params: &ProjectionParams,
    delta: f64,
    gate_radius: f64,
) -> Result<Vec<OverlapLabel>, OverlapError> {
    if scans.len() != poses.len() {
        return Err(OverlapError::LengthMismatch { scans: scans.len(), poses: poses.len() });
    }
    let mut images = Vec::with_capacity(scans.len());
    for scan in scans {
        let (image, _) = project_cloud(scan, params)?;
        images.push(image);
    }
    let mut labels = Vec::new();
    for (q, pose_q) in poses.iter().enumerate() {
        for (r, pose_r) in poses.iter().enumerate() {
            if pose_q.distance_to(pose_r) > gate_radius {
                continue;
            }
            let value = if q == r {
                1.0
            } else {
                let (reproj, _) = reproject(&scans[r], pose_q, pose_r, params)?;
                overlap(&images[q], &reproj, delta)?
            };
            labels.push(OverlapLabel { query_id: q, reference_id: r, overlap: value });
        }
    }
    Ok(labels)
}

// ── Label file ───────────────────────────────────────────────────────────

/// One `query_id reference_id overlap` record per line; `#` starts a comment.
pub fn write_labels<W: Write>(mut out: W, labels: &[OverlapLabel]) -> io::Result<()> {
    writeln!(out, "# query_id reference_id overlap")?;
    for label in labels {
        writeln!(out, "{} {} {:.6}", label.query_id, label.reference_id, label.overlap)?;
    }
    Ok(())
}

pub fn read_labels<R: BufRead>(input: R) -> Result<Vec<OverlapLabel>, OverlapError> {
    let mut labels = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| OverlapError::LabelFile(format!("line {}: {e}", lineno + 1)))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let parse = |field: Option<&str>, what: &str| -> Result<f64, OverlapError> {
            field
                .ok_or_else(|| OverlapError::LabelFile(format!("line {}: missing {what}", lineno + 1)))?
                .parse::<f64>()
                .map_err(|e| OverlapError::LabelFile(format!("line {}: bad {what}: {e}", lineno + 1)))
        };
        let q = parse(fields.next(), "query id")?;
        let r = parse(fields.next(), "reference id")?;
        let ov = parse(fields.next(), "overlap")?;
        if fields.next().is_some() {
            return Err(OverlapError::LabelFile(format!("line {}: trailing fields", lineno + 1)));
        }
        if !(0.0..=1.0).contains(&ov) {
            return Err(OverlapError::LabelFile(format!(
                "line {}: overlap {ov} outside [0, 1]",
                lineno + 1
            )));
        }
        labels.push(OverlapLabel { query_id: q as usize, reference_id: r as usize, overlap: ov });
    }
    Ok(labels)
}

pub fn write_labels_file(path: &Path, labels: &[OverlapLabel]) -> io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_labels(&mut writer, labels)?;
    writer.flush()
}

pub fn read_labels_file(path: &Path) -> Result<Vec<OverlapLabel>, OverlapError> {
    let file =
        File::open(path).map_err(|e| OverlapError::LabelFile(format!("{}: {e}", path.display())))?;
    read_labels(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangeimage::RangeImage;

    fn params() -> ProjectionParams {
        ProjectionParams::new(16, 4, 0.1, 0.4).expect("params")
    }

    fn image_from(params: ProjectionParams, pixels: Vec<f32>) -> RangeImage {
        RangeImage::from_pixels(params, pixels).expect("image")
    }

    #[test]
    fn pose_rejects_non_orthonormal_rotation() {
        let err = Pose::new([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
            .expect_err("skewed");
        assert!(matches!(err, OverlapError::NotARotation { .. }));
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let pose = Pose::from_yaw(0.7, [1.0, -2.0, 0.5]);
        let round = pose.inverse().compose(&pose);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((round.rotation()[i][j] - expect).abs() < 1e-12);
            }
            assert!(round.translation()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_overlap_fully() {
        let p = params();
        let pixels: Vec<f32> = (0..64).map(|i| if i % 5 == 0 { 0.0 } else { 2.0 + i as f32 }).collect();
        let image = image_from(p, pixels);
        let value = overlap(&image, &image, 1.0).expect("overlap");
        assert_eq!(value, 1.0);
    }

    #[test]
    fn disjoint_valid_masks_overlap_zero() {
        let p = params();
        let mut a = vec![0.0f32; 64];
        let mut b = vec![0.0f32; 64];
        for i in 0..32 {
            a[i] = 3.0;
            b[i + 32] = 3.0;
        }
        let value = overlap(&image_from(p, a), &image_from(p, b), 1.0).expect("overlap");
        assert_eq!(value, 0.0);
    }

    #[test]
    fn fully_invalid_pair_is_an_error() {
        let p = params();
        let a = image_from(p, vec![0.0; 64]);
        let b = image_from(p, vec![0.0; 64]);
        assert!(matches!(overlap(&a, &b, 1.0), Err(OverlapError::NoValidPixels)));
    }

    #[test]
    fn overlap_matches_brute_force_counter_exactly() {
        // Independent double-loop oracle over random 4x8 images.
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let p = ProjectionParams::new(8, 4, 0.1, 0.4).expect("params");
        for _ in 0..50 {
            let gen = |next: &mut dyn FnMut() -> u64| -> Vec<f32> {
                (0..32)
                    .map(|_| {
                        let r = next();
                        if r % 4 == 0 {
                            0.0
                        } else {
                            ((r >> 8) % 100) as f32 / 10.0
                        }
                    })
                    .collect()
            };
            let a = gen(&mut next);
            let b = gen(&mut next);
            let delta = 1.0;

            let mut matching = 0usize;
            let mut valid_a = 0usize;
            let mut valid_b = 0usize;
            for v in 0..4 {
                for u in 0..8 {
                    let x = a[v * 8 + u];
                    let y = b[v * 8 + u];
                    if x > 0.0 {
                        valid_a += 1;
                    }
                    if y > 0.0 {
                        valid_b += 1;
                    }
                    if x > 0.0 && y > 0.0 && (x as f64 - y as f64).abs() <= delta {
                        matching += 1;
                    }
                }
            }
            let ia = image_from(p, a);
            let ib = image_from(p, b);
            match overlap(&ia, &ib, delta) {
                Ok(value) => {
                    let expected = matching as f64 / valid_a.min(valid_b) as f64;
                    assert_eq!(value, expected);
                }
                Err(OverlapError::NoValidPixels) => assert_eq!(valid_a.min(valid_b), 0),
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn loop_closure_threshold_is_strict() {
        assert!(!is_loop_closure(0.3, LOOP_CLOSURE_THRESHOLD));
        assert!(is_loop_closure(0.300001, LOOP_CLOSURE_THRESHOLD));
        assert!(!is_loop_closure(0.0, LOOP_CLOSURE_THRESHOLD));
    }

    #[test]
    fn identical_poses_reproject_like_plain_projection() {
        let p = ProjectionParams::new(24, 6, 0.1, 0.45).expect("params");
        let cloud = PointCloud::new(vec![
            [5.0, 1.0, -0.5],
            [4.0, -2.0, -1.0],
            [7.0, 0.5, 0.2],
            [3.0, 3.0, -0.8],
        ])
        .expect("cloud");
        let pose = Pose::from_yaw(0.3, [10.0, 5.0, 0.0]);
        let (direct, _) = project_cloud(&cloud, &p).expect("direct");
        let (reproj, _) = reproject(&cloud, &pose, &pose, &p).expect("reproject");
        assert_eq!(direct.pixels(), reproj.pixels());
    }

    #[test]
    fn yaw_rotated_reference_reprojects_as_a_column_shift() {
        let p = ProjectionParams::new(24, 6, 0.12, 0.4).expect("params");
        let w = p.width as f64;
        // Points at pixel centers so the shift is exact.
        let mut points = Vec::new();
        for v in 0..p.height {
            for u in (0..p.width).step_by(2) {
                let azimuth = std::f64::consts::PI * (1.0 - 2.0 * (u as f64 + 0.5) / w);
                let elevation = p.fov() * (1.0 - (v as f64 + 0.5) / p.height as f64) - p.fov_up;
                let r = 3.0 + (u % 5) as f64 + 0.5 * v as f64;
                points.push([
                    r * elevation.cos() * azimuth.cos(),
                    r * elevation.cos() * azimuth.sin(),
                    r * elevation.sin(),
                ]);
            }
        }
        let cloud = PointCloud::new(points).expect("cloud");
        let (base, _) = project_cloud(&cloud, &p).expect("base");
        for k in [1i64, 7] {
            // pose_q^-1 * pose_r rotates the reference by -k column-angles,
            // which moves image content k columns to the right.
            let pose_q = Pose::identity();
            let pose_r = Pose::from_yaw(-2.0 * std::f64::consts::PI * k as f64 / w, [0.0; 3]);
            let (reproj, _) = reproject(&cloud, &pose_q, &pose_r, &p).expect("reproject");
            assert_eq!(reproj.pixels(), base.shift_columns(k).pixels(), "shift {k}");
        }
    }

    #[test]
    fn far_translation_clears_the_query_mask() {
        let p = ProjectionParams::new(24, 6, 0.1, 0.45).expect("params");
        let cloud =
            PointCloud::new(vec![[5.0, 1.0, -0.5], [4.0, -2.0, -1.0], [7.0, 0.5, 0.2]]).expect("cloud");
        let pose_q = Pose::identity();
        // Far below everything: the reprojected points leave the vertical
        // field of view entirely.
        let pose_r = Pose::from_translation([0.0, 0.0, 1e5]);
        let (query, _) = project_cloud(&cloud, &p).expect("query");
        let (reproj, _) = reproject(&cloud, &pose_q, &pose_r, &p).expect("reproject");
        let shared = query
            .pixels()
            .iter()
            .zip(reproj.pixels())
            .filter(|(&a, &b)| a > 0.0 && b > 0.0)
            .count();
        assert_eq!(shared, 0);
    }

    #[test]
    fn single_scan_sequence_labels_itself_fully() {
        let p = ProjectionParams::new(24, 6, 0.1, 0.45).expect("params");
        let cloud = PointCloud::new(vec![[5.0, 1.0, -0.5], [4.0, -2.0, -1.0]]).expect("cloud");
        let labels =
            label_sequence(&[cloud], &[Pose::identity()], &p, 1.0, 50.0).expect("labels");
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0], OverlapLabel { query_id: 0, reference_id: 0, overlap: 1.0 });
    }

    #[test]
    fn distant_scans_are_gated_out() {
        let p = ProjectionParams::new(24, 6, 0.1, 0.45).expect("params");
        let cloud = PointCloud::new(vec![[5.0, 1.0, -0.5], [4.0, -2.0, -1.0]]).expect("cloud");
        let scans = vec![cloud.clone(), cloud];
        let poses = vec![Pose::identity(), Pose::from_translation([200.0, 0.0, 0.0])];
        let labels = label_sequence(&scans, &poses, &p, 1.0, 50.0).expect("labels");
        // Only the two self pairs survive the gate.
        assert_eq!(labels.len(), 2);
        assert!(labels.iter().all(|l| l.query_id == l.reference_id && l.overlap == 1.0));
    }

    #[test]
    fn sequence_labels_match_pairwise_recomputation() {
        let p = ProjectionParams::new(32, 8, 0.1, 0.45).expect("params");
        let base = PointCloud::new(vec![
            [6.0, 1.0, -0.5],
            [5.0, -2.0, -1.0],
            [8.0, 0.5, 0.2],
            [4.0, 2.5, -0.9],
            [9.0, -1.5, -0.3],
        ])
        .expect("cloud");
        let scans = vec![base.clone(), base.clone(), base];
        let poses = vec![
            Pose::identity(),
            Pose::from_yaw(0.2, [1.0, 0.5, 0.0]),
            Pose::from_yaw(-0.4, [3.0, -1.0, 0.0]),
        ];
        let labels = label_sequence(&scans, &poses, &p, 1.0, 50.0).expect("labels");
        assert_eq!(labels.len(), 9);
        for label in &labels {
            let (query_img, _) = project_cloud(&scans[label.query_id], &p).expect("query");
            let expected = if label.query_id == label.reference_id {
                1.0
            } else {
                let (reproj, _) = reproject(
                    &scans[label.reference_id],
                    &poses[label.query_id],
                    &poses[label.reference_id],
                    &p,
                )
                .expect("reproject");
                overlap(&query_img, &reproj, 1.0).expect("overlap")
            };
            assert_eq!(label.overlap, expected);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Overlap stays in [0, 1] for every comparable pair and is
            /// exactly 1 against itself.
            #[test]
            fn overlap_is_bounded_and_reflexive(
                w in 2usize..20,
                h in 1usize..6,
                seed in 0u64..5000,
                delta in 0.1f64..5.0,
            ) {
                let params = ProjectionParams::new(w, h, 0.1, 0.4).expect("params");
                let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3);
                let mut gen = || -> Vec<f32> {
                    (0..w * h)
                        .map(|_| {
                            state ^= state << 13;
                            state ^= state >> 7;
                            state ^= state << 17;
                            if state % 3 == 0 { 0.0 } else { ((state >> 40) % 600) as f32 / 10.0 }
                        })
                        .collect()
                };
                let a = RangeImage::from_pixels(params, gen()).expect("a");
                let b = RangeImage::from_pixels(params, gen()).expect("b");
                match overlap(&a, &b, delta) {
                    Ok(value) => prop_assert!((0.0..=1.0).contains(&value)),
                    Err(OverlapError::NoValidPixels) => {
                        prop_assert!(a.valid_count() == 0 || b.valid_count() == 0);
                    }
                    Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
                }
                if a.valid_count() > 0 {
                    prop_assert_eq!(overlap(&a, &a, delta).expect("self"), 1.0);
                }
            }
        }
    }

    #[test]
    fn label_file_round_trips_at_six_decimals() {
        let labels = vec![
            OverlapLabel { query_id: 0, reference_id: 0, overlap: 1.0 },
            OverlapLabel { query_id: 0, reference_id: 3, overlap: 0.4375 },
            OverlapLabel { query_id: 2, reference_id: 1, overlap: 0.123456 },
        ];
        let mut buf = Vec::new();
        write_labels(&mut buf, &labels).expect("write");
        let loaded = read_labels(&buf[..]).expect("read");
        assert_eq!(loaded, labels);
    }

    #[test]
    fn malformed_label_lines_are_rejected() {
        assert!(matches!(read_labels(&b"1 2"[..]), Err(OverlapError::LabelFile(_))));
        assert!(matches!(read_labels(&b"1 2 1.5"[..]), Err(OverlapError::LabelFile(_))));
        assert!(matches!(read_labels(&b"a b c"[..]), Err(OverlapError::LabelFile(_))));
        let ok = read_labels(&b"# comment\n\n0 1 0.250000\n"[..]).expect("ok");
        assert_eq!(ok.len(), 1);
    }
}
