//! Observation and action types plus the deterministic force/geometry math
//! that sits between the simulator and the networks: 6D rotation encoding,
//! taxel force frames, net-force aggregation and point-cloud preprocessing.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("degenerate 6d rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tactile grid mismatch: expected {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    GridMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("taxel count {got} does not match grid {rows}x{cols}")]
    TaxelCount { rows: usize, cols: usize, got: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("action length {got}, expected {expected}")]
    BadActionLength { expected: usize, got: usize },
    #[error("observation history has {got} frames, need at least {need}")]
    HistoryTooShort { need: usize, got: usize },
}

const EPS_DEGENERATE: f64 = 1e-9;
const EPS_ORTHONORMAL: f64 = 1e-6;

/// Recover a rotation matrix from the 6D encoding (the first two matrix
/// columns, stacked) by Gram-Schmidt. The third column is the cross
/// product, so the result is always a proper rotation.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>, SensingError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(SensingError::NonFinite("rot6d"));
    }
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let na = a.norm();
    if na <= EPS_DEGENERATE {
        return Err(SensingError::DegenerateRotation("first column has near-zero norm"));
    }
    let u1 = a / na;
    let b_orth = b - u1 * u1.dot(&b);
    let nb = b_orth.norm();
    if nb <= EPS_DEGENERATE {
        return Err(SensingError::DegenerateRotation(
            "second column is parallel to the first",
        ));
    }
    let u2 = b_orth / nb;
    let u3 = u1.cross(&u2);
    Ok(Matrix3::from_columns(&[u1, u2, u3]))
}

/// First two columns of a rotation matrix. The input must already be a
/// proper rotation; anything else is an error, not silently re-normalised.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<[f64; 6], SensingError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SensingError::NonFinite("rotation matrix"));
    }
    let gram = m.transpose() * m;
    let dev = (gram - Matrix3::identity()).abs().max();
    if dev > EPS_ORTHONORMAL {
        return Err(SensingError::NotARotation(format!(
            "columns not orthonormal (deviation {dev:.3e})"
        )));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > EPS_ORTHONORMAL {
        return Err(SensingError::NotARotation(format!("determinant {det:.6}")));
    }
    Ok([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// One tactile cell: tri-axial force in the taxel frame plus the taxel pose
/// in the camera frame (6D rotation + position).
#[derive(Debug, Clone, PartialEq)]
pub struct TaxelReading {
    pub force: [f64; 3],
    pub rot6d: [f64; 6],
    pub position: [f64; 3],
}

impl TaxelReading {
    pub fn zero() -> Self {
        TaxelReading {
            force: [0.0; 3],
            rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            position: [0.0; 3],
        }
    }
}

/// Row-major grid of taxels for one sensor pad.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    pub rows: usize,
    pub cols: usize,
    pub taxels: Vec<TaxelReading>,
}

impl SensorGrid {
    pub fn new(rows: usize, cols: usize, taxels: Vec<TaxelReading>) -> Result<Self, SensingError> {
        if taxels.len() != rows * cols {
            return Err(SensingError::TaxelCount {
                rows,
                cols,
                got: taxels.len(),
            });
        }
        Ok(SensorGrid { rows, cols, taxels })
    }
}

/// Tactile frame from all sensor pads at one timestep. All grids must share
/// the same dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileFrame {
    pub sensors: Vec<SensorGrid>,
}

impl TactileFrame {
    pub fn new(sensors: Vec<SensorGrid>) -> Result<Self, SensingError> {
        if let Some(first) = sensors.first() {
            for s in &sensors[1..] {
                if s.rows != first.rows || s.cols != first.cols {
                    return Err(SensingError::GridMismatch {
                        expected_rows: first.rows,
                        expected_cols: first.cols,
                        got_rows: s.rows,
                        got_cols: s.cols,
                    });
                }
            }
        }
        Ok(TactileFrame { sensors })
    }

    pub fn taxel_count(&self) -> usize {
        self.sensors.iter().map(|s| s.taxels.len()).sum()
    }
}

/// Taxel force rotated from its own frame into the camera frame.
pub fn taxel_force_camera(t: &TaxelReading) -> Result<Vector3<f64>, SensingError> {
    if t.force.iter().any(|v| !v.is_finite()) {
        return Err(SensingError::NonFinite("taxel force"));
    }
    let r = rot6d_to_matrix(&t.rot6d)?;
    Ok(r * Vector3::new(t.force[0], t.force[1], t.force[2]))
}

/// Net contact force: camera-frame sum over every taxel of every sensor.
pub fn net_force(frame: &TactileFrame) -> Result<Vector3<f64>, SensingError> {
    let mut sum = Vector3::zeros();
    for sensor in &frame.sensors {
        for taxel in &sensor.taxels {
            sum += taxel_force_camera(taxel)?;
        }
    }
    Ok(sum)
}

/// Net forces over the most recent `h` observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NetForceSeries {
    pub forces: Vec<[f64; 3]>,
}

impl NetForceSeries {
    pub fn flat(&self) -> Vec<f64> {
        self.forces.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.forces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forces.is_empty()
    }

    /// Euclidean norm of the most recent net force.
    pub fn latest_norm(&self) -> f64 {
        self.forces
            .last()
            .map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt())
            .unwrap_or(0.0)
    }
}

pub fn net_force_series(history: &[Observation], h: usize) -> Result<NetForceSeries, SensingError> {
    if history.len() < h {
        return Err(SensingError::HistoryTooShort {
            need: h,
            got: history.len(),
        });
    }
    let mut forces = Vec::with_capacity(h);
    for obs in &history[history.len() - h..] {
        let f = net_force(&obs.tactile)?;
        forces.push([f.x, f.y, f.z]);
    }
    Ok(NetForceSeries { forces })
}

/// Camera-frame point cloud with an optional per-point intensity channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        c
    }
}

/// Axis-aligned crop region for cloud preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorkspaceBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = *p;
        for k in 0..3 {
            out[k] = out[k].clamp(self.min[k], self.max[k]);
        }
        out
    }
}

/// Crop to the workspace box, voxel-downsample if the crop still exceeds
/// `n_max`, then truncate/pad to exactly `n_max` points. Padding repeats
/// the centroid of the kept points, so downstream encoders always see a
/// fixed-size, in-bounds cloud. If everything is cropped away the clamped
/// centroid of the raw cloud stands in, keeping the output non-empty.
pub fn preprocess_cloud(
    cloud: &PointCloud,
    bounds: &WorkspaceBox,
    voxel: f64,
    n_max: usize,
) -> Result<PointCloud, SensingError> {
    assert!(n_max > 0, "n_max must be positive");
    if cloud.is_empty() {
        return Err(SensingError::EmptyCloud);
    }
    if cloud.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SensingError::NonFinite("point cloud"));
    }

    let mut kept: Vec<[f64; 3]> = Vec::new();
    let mut kept_int: Vec<f64> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if bounds.contains(p) {
            kept.push(*p);
            if let Some(ints) = &cloud.intensity {
                kept_int.push(ints[i]);
            }
        }
    }
    if kept.is_empty() {
        kept.push(bounds.clamp(&cloud.centroid()));
        if cloud.intensity.is_some() {
            kept_int.push(0.0);
        }
    }

    if kept.len() > n_max {
        // One point per occupied voxel, first hit wins; input order is
        // deterministic so the selection is too.
        let mut seen = std::collections::HashSet::new();
        let mut vox: Vec<[f64; 3]> = Vec::new();
        let mut vox_int: Vec<f64> = Vec::new();
        for (i, p) in kept.iter().enumerate() {
            let key = (
                ((p[0] - bounds.min[0]) / voxel).floor() as i64,
                ((p[1] - bounds.min[1]) / voxel).floor() as i64,
                ((p[2] - bounds.min[2]) / voxel).floor() as i64,
            );
            if seen.insert(key) {
                vox.push(*p);
                if !kept_int.is_empty() {
                    vox_int.push(kept_int[i]);
                }
            }
        }
        kept = vox;
        kept_int = vox_int;
        kept.truncate(n_max);
        kept_int.truncate(n_max);
    }

    let pad = PointCloud {
        points: kept.clone(),
        intensity: None,
    }
    .centroid();
    while kept.len() < n_max {
        kept.push(pad);
        if cloud.intensity.is_some() {
            kept_int.push(0.0);
        }
    }

    Ok(PointCloud {
        points: kept,
        intensity: cloud.intensity.as_ref().map(|_| kept_int),
    })
}

/// One synchronized sensor snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub tactile: TactileFrame,
    pub step: usize,
}

/// Gripper command: target wrist pose in the camera frame (translation
/// plus 6D rotation) and target joint positions. The executor servos
/// toward these targets at rate-limited speed, so a command far from the
/// current state simply takes several control periods to reach.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub translation: [f64; 3],
    pub rotation6d: [f64; 6],
    pub joints: Vec<f64>,
}

impl Action {
    pub fn dim(joints: usize) -> usize {
        3 + 6 + joints
    }

    /// Origin target: zero translation, identity rotation, zero joints.
    pub fn zero(joints: usize) -> Self {
        Action {
            translation: [0.0; 3],
            rotation6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            joints: vec![0.0; joints],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.joints.len()));
        out.extend_from_slice(&self.translation);
        out.extend_from_slice(&self.rotation6d);
        out.extend_from_slice(&self.joints);
        out
    }

    pub fn from_flat(flat: &[f64], joints: usize) -> Result<Self, SensingError> {
        let expected = Self::dim(joints);
        if flat.len() != expected {
            return Err(SensingError::BadActionLength {
                expected,
                got: flat.len(),
            });
        }
        Ok(Action {
            translation: [flat[0], flat[1], flat[2]],
            rotation6d: [flat[3], flat[4], flat[5], flat[6], flat[7], flat[8]],
            joints: flat[9..].to_vec(),
        })
    }
}

/// Fixed-length sequence of future actions predicted in one shot.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub actions: Vec<Action>,
}

impl ActionChunk {
    pub fn flatten(&self) -> Vec<f64> {
        self.actions.iter().flat_map(|a| a.flatten()).collect()
    }

    pub fn from_flat(flat: &[f64], horizon: usize, joints: usize) -> Result<Self, SensingError> {
        let dim = Action::dim(joints);
        if flat.len() != horizon * dim {
            return Err(SensingError::BadActionLength {
                expected: horizon * dim,
                got: flat.len(),
            });
        }
        let actions = flat
            .chunks(dim)
            .map(|c| Action::from_flat(c, joints))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ActionChunk { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::stream_rng;
    use nalgebra::Rotation3;
    use rand::Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-3.0..3.0);
        Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
    }

    #[test]
    fn rot6d_roundtrip() {
        let mut rng = stream_rng(21, "test/rot6d");
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            let six = matrix_to_rot6d(&r).unwrap();
            let back = rot6d_to_matrix(&six).unwrap();
            assert!((back - r).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gram_schmidt_repairs_unnormalised_input() {
        // Scaled and sheared columns still produce a proper rotation.
        let six = [2.0, 0.0, 0.0, 1.0, 3.0, 0.0];
        let r = rot6d_to_matrix(&six).unwrap();
        let gram = r.transpose() * r;
        assert!((gram - Matrix3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        // First column direction is preserved by Gram-Schmidt.
        assert!((r[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rot6d_rejected() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn matrix_to_rot6d_rejects_non_rotation() {
        let scaled = Matrix3::identity() * 1.1;
        assert!(matrix_to_rot6d(&scaled).is_err());
        let mut reflection = Matrix3::identity();
        reflection[(2, 2)] = -1.0;
        assert!(matrix_to_rot6d(&reflection).is_err());
    }

    #[test]
    fn taxel_force_rotates_into_camera_frame() {
        // Taxel frame rotated 90 degrees about z: taxel x maps to camera y.
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2)
            .into_inner();
        let t = TaxelReading {
            force: [1.0, 0.0, 0.0],
            rot6d: matrix_to_rot6d(&r).unwrap(),
            position: [0.0; 3],
        };
        let f = taxel_force_camera(&t).unwrap();
        assert!(f.x.abs() < 1e-12);
        assert!((f.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn net_force_matches_independent_sum() {
        let mut rng = stream_rng(22, "test/netforce");
        let mut taxels = Vec::new();
        let mut expect = Vector3::zeros();
        for _ in 0..15 {
            let r = random_rotation(&mut rng);
            let force = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            expect += r * Vector3::new(force[0], force[1], force[2]);
            taxels.push(TaxelReading {
                force,
                rot6d: matrix_to_rot6d(&r).unwrap(),
                position: [0.0; 3],
            });
        }
        let frame = TactileFrame::new(vec![SensorGrid::new(3, 5, taxels).unwrap()]).unwrap();
        let got = net_force(&frame).unwrap();
        assert!((got - expect).norm() < 1e-9);
    }

    #[test]
    fn zero_contact_frame_has_zero_net_force() {
        let taxels = vec![TaxelReading::zero(); 15];
        let frame = TactileFrame::new(vec![SensorGrid::new(3, 5, taxels).unwrap()]).unwrap();
        assert!(net_force(&frame).unwrap().norm() < 1e-15);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = SensorGrid::new(3, 5, vec![TaxelReading::zero(); 15]).unwrap();
        let b = SensorGrid::new(2, 5, vec![TaxelReading::zero(); 10]).unwrap();
        assert!(TactileFrame::new(vec![a, b]).is_err());
    }

    fn unit_box() -> WorkspaceBox {
        WorkspaceBox {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    #[test]
    fn preprocess_crops_pads_and_fixes_size() {
        let cloud = PointCloud::new(vec![[0.5, 0.5, 0.5], [0.1, 0.9, 0.2], [2.0, 0.0, 0.0]]);
        let out = preprocess_cloud(&cloud, &unit_box(), 0.05, 6).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.points.iter().all(|p| unit_box().contains(p)));
        // Out-of-box point dropped, padding equals centroid of the two kept.
        let c = [0.3, 0.7, 0.35];
        for p in &out.points[2..] {
            for k in 0..3 {
                assert!((p[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn preprocess_downsamples_to_limit() {
        let mut rng = stream_rng(23, "test/voxel");
        let points: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(points);
        let out = preprocess_cloud(&cloud, &unit_box(), 0.2, 64).unwrap();
        assert_eq!(out.len(), 64);
    }

    #[test]
    fn preprocess_survives_fully_cropped_cloud() {
        let cloud = PointCloud::new(vec![[5.0, 5.0, 5.0], [7.0, 5.0, 5.0]]);
        let out = preprocess_cloud(&cloud, &unit_box(), 0.05, 4).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.points.iter().all(|p| unit_box().contains(p)));
    }

    #[test]
    fn action_flatten_roundtrip() {
        let a = Action {
            translation: [0.1, -0.2, 0.0],
            rotation6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            joints: vec![0.05, -0.01],
        };
        let flat = a.flatten();
        assert_eq!(flat.len(), Action::dim(2));
        assert_eq!(Action::from_flat(&flat, 2).unwrap(), a);

        let chunk = ActionChunk {
            actions: vec![a.clone(), Action::zero(2)],
        };
        let flat = chunk.flatten();
        assert_eq!(ActionChunk::from_flat(&flat, 2, 2).unwrap(), chunk);
        assert!(ActionChunk::from_flat(&flat, 3, 2).is_err());
    }

    #[test]
    fn zero_action_rotation_is_identity() {
        let a = Action::zero(2);
        let r = rot6d_to_matrix(&a.rotation6d).unwrap();
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);
    }
}
