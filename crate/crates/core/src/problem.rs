//! Problem-space types: poses, landmarks, measurement edges and estimates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type PoseId = u64;
pub type LandmarkId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension must be 2 or 3, got {0}")]
    Dimension(usize),
    #[error("edge {edge} references missing pose {id}")]
    MissingPose { edge: usize, id: PoseId },
    #[error("edge {edge} references missing landmark {id}")]
    MissingLandmark { edge: usize, id: LandmarkId },
    #[error("edge {edge}: precisions must be positive")]
    Precision { edge: usize },
    #[error("edge {edge}: measured rotation is not in SO(d)")]
    Rotation { edge: usize },
    #[error("edge {edge}: measurement has wrong dimension")]
    Shape { edge: usize },
    #[error("edge {edge} connects pose {id} to itself")]
    SelfLoop { edge: usize, id: PoseId },
    #[error("estimate is missing variable {0}")]
    MissingEstimate(String),
}

/// Rigid pose with `rotation ∈ SO(d)` and `translation ∈ ℝᵈ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: DMatrix<f64>,
    pub translation: DVector<f64>,
}

impl Pose {
    pub fn identity(d: usize) -> Self {
        Self { rotation: DMatrix::identity(d, d), translation: DVector::zeros(d) }
    }

    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Self { rotation: rot2(theta), translation: DVector::from_vec(vec![x, y]) }
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn compose(&self, rotation: &DMatrix<f64>, translation: &DVector<f64>) -> Pose {
        Pose {
            rotation: &self.rotation * rotation,
            translation: &self.translation + &self.rotation * translation,
        }
    }

    /// `self⁻¹ ∘ other` as (R̃, t̃).
    pub fn between(&self, other: &Pose) -> (DMatrix<f64>, DVector<f64>) {
        let rt = self.rotation.transpose();
        (&rt * &other.rotation, &rt * (&other.translation - &self.translation))
    }
}

pub fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

pub fn angle2(r: &DMatrix<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

/// Rotation matrix from a (not necessarily unit) quaternion `(qx, qy, qz, qw)`.
pub fn quat_to_matrix(qx: f64, qy: f64, qz: f64, qw: f64) -> DMatrix<f64> {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
    let m = q.to_rotation_matrix();
    DMatrix::from_iterator(3, 3, m.matrix().iter().cloned())
}

/// Unit quaternion `(qx, qy, qz, qw)` with `qw ≥ 0`.
pub fn matrix_to_quat(r: &DMatrix<f64>) -> [f64; 4] {
    let m = Matrix3::from_iterator(r.iter().cloned());
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let (x, y, z, w) = (q.i, q.j, q.k, q.w);
    if w < 0.0 {
        [-x, -y, -z, -w]
    } else {
        [x, y, z, w]
    }
}

pub fn axis_angle3(axis: Vector3<f64>, angle: f64) -> DMatrix<f64> {
    let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    DMatrix::from_iterator(3, 3, r.matrix().iter().cloned())
}

/// Geodesic distance (radians) between two rotations.
pub fn rotation_angle_between(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let rel = a.transpose() * b;
    if rel.nrows() == 2 {
        angle2(&rel).abs()
    } else {
        // atan2 keeps precision near zero where acos of the trace does not.
        let c = (rel.trace() - 1.0) * 0.5;
        let s = 0.5
            * ((rel[(2, 1)] - rel[(1, 2)]).powi(2) + (rel[(0, 2)] - rel[(2, 0)]).powi(2) + (rel[(1, 0)] - rel[(0, 1)]).powi(2))
                .sqrt();
        s.atan2(c)
    }
}

pub fn is_rotation(r: &DMatrix<f64>, tol: f64) -> bool {
    let d = r.nrows();
    r.ncols() == d
        && (r.transpose() * r - DMatrix::<f64>::identity(d, d)).norm() <= tol
        && (r.determinant() - 1.0).abs() <= tol.max(1e-12) * 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    Odometry,
    LoopClosure,
    PoseLandmark,
}

impl EdgeClass {
    /// Odometry is never robustified; everything else may be an outlier.
    pub fn is_robust(self) -> bool {
        !matches!(self, EdgeClass::Odometry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeKind {
    RelativePose {
        from: PoseId,
        to: PoseId,
        rotation: DMatrix<f64>,
        translation: DVector<f64>,
        kappa: f64,
        tau: f64,
    },
    PoseLandmark {
        pose: PoseId,
        landmark: LandmarkId,
        position: DVector<f64>,
        tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementEdge {
    pub kind: EdgeKind,
    pub class: EdgeClass,
}

impl MeasurementEdge {
    pub fn relative_pose(
        from: PoseId,
        to: PoseId,
        rotation: DMatrix<f64>,
        translation: DVector<f64>,
        kappa: f64,
        tau: f64,
        class: EdgeClass,
    ) -> Self {
        Self { kind: EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau }, class }
    }

    pub fn pose_landmark(pose: PoseId, landmark: LandmarkId, position: DVector<f64>, tau: f64) -> Self {
        Self {
            kind: EdgeKind::PoseLandmark { pose, landmark, position, tau },
            class: EdgeClass::PoseLandmark,
        }
    }

    pub fn is_robust(&self) -> bool {
        self.class.is_robust()
    }

    /// Residual degrees of freedom used for χ² thresholds.
    pub fn residual_dof(&self, d: usize) -> usize {
        match self.kind {
            EdgeKind::RelativePose { .. } => d * (d + 1) / 2 + d,
            EdgeKind::PoseLandmark { .. } => d,
        }
    }

    /// Precision-weighted squared residual `r²` at a problem-space estimate.
    pub fn squared_residual(&self, est: &Estimate) -> Result<f64, ProblemError> {
        match &self.kind {
            EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau } => {
                let pi = est.pose(*from)?;
                let pj = est.pose(*to)?;
                let rot_err = &pj.rotation - &pi.rotation * rotation;
                let tr_err = &pj.translation - &pi.translation - &pi.rotation * translation;
                Ok(kappa * rot_err.norm_squared() + tau * tr_err.norm_squared())
            }
            EdgeKind::PoseLandmark { pose, landmark, position, tau } => {
                let pi = est.pose(*pose)?;
                let l = est.landmark(*landmark)?;
                let err = l - &pi.translation - &pi.rotation * position;
                Ok(tau * err.norm_squared())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemMeta {
    pub source: String,
    /// Number of edges whose information matrix was not already isotropic on read.
    pub isotropized_edges: usize,
}

/// An estimation problem: poses, optional landmarks, and measurement edges.
///
/// Pose and landmark values are either ground truth (synthetic) or the initial
/// guess carried by the input file.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub d: usize,
    pub poses: BTreeMap<PoseId, Pose>,
    pub landmarks: BTreeMap<LandmarkId, DVector<f64>>,
    pub edges: Vec<MeasurementEdge>,
    pub meta: ProblemMeta,
}

impl Problem {
    pub fn new(d: usize) -> Result<Self, ProblemError> {
        if d != 2 && d != 3 {
            return Err(ProblemError::Dimension(d));
        }
        Ok(Self {
            d,
            poses: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            edges: Vec::new(),
            meta: ProblemMeta::default(),
        })
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.d != 2 && self.d != 3 {
            return Err(ProblemError::Dimension(self.d));
        }
        let d = self.d;
        for (k, e) in self.edges.iter().enumerate() {
            match &e.kind {
                EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau } => {
                    for id in [from, to] {
                        if !self.poses.contains_key(id) {
                            return Err(ProblemError::MissingPose { edge: k, id: *id });
                        }
                    }
                    if from == to {
                        return Err(ProblemError::SelfLoop { edge: k, id: *from });
                    }
                    if !(*kappa > 0.0 && *tau > 0.0) {
                        return Err(ProblemError::Precision { edge: k });
                    }
                    if rotation.nrows() != d || translation.len() != d {
                        return Err(ProblemError::Shape { edge: k });
                    }
                    if !is_rotation(rotation, 1e-9) {
                        return Err(ProblemError::Rotation { edge: k });
                    }
                }
                EdgeKind::PoseLandmark { pose, landmark, position, tau } => {
                    if !self.poses.contains_key(pose) {
                        return Err(ProblemError::MissingPose { edge: k, id: *pose });
                    }
                    if !self.landmarks.contains_key(landmark) {
                        return Err(ProblemError::MissingLandmark { edge: k, id: *landmark });
                    }
                    if !(*tau > 0.0) {
                        return Err(ProblemError::Precision { edge: k });
                    }
                    if position.len() != d {
                        return Err(ProblemError::Shape { edge: k });
                    }
                }
            }
        }
        Ok(())
    }

    /// Indices of robust edges in edge order; the GNC weight slots follow this order.
    pub fn robust_edges(&self) -> Vec<usize> {
        self.edges.iter().enumerate().filter(|(_, e)| e.is_robust()).map(|(k, _)| k).collect()
    }

    pub fn count_class(&self, class: EdgeClass) -> usize {
        self.edges.iter().filter(|e| e.class == class).count()
    }

    /// The pose/landmark values carried by the problem as an estimate.
    pub fn values(&self) -> Estimate {
        Estimate { d: self.d, poses: self.poses.clone(), landmarks: self.landmarks.clone() }
    }

    /// Max pairwise distance between pose translations, or the max measured
    /// translation norm when there are fewer than two poses.
    pub fn scene_scale(&self) -> f64 {
        let pts: Vec<&DVector<f64>> = self.poses.values().map(|p| &p.translation).collect();
        let mut best = 0.0_f64;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                best = best.max((pts[i] - pts[j]).norm());
            }
        }
        if best > 0.0 {
            return best;
        }
        self.edges
            .iter()
            .map(|e| match &e.kind {
                EdgeKind::RelativePose { translation, .. } => translation.norm(),
                EdgeKind::PoseLandmark { position, .. } => position.norm(),
            })
            .fold(0.0, f64::max)
    }

    /// Sum of all factor values at unit weights.
    pub fn cost(&self, est: &Estimate) -> Result<f64, ProblemError> {
        self.edges.iter().map(|e| e.squared_residual(est)).sum()
    }

    /// Dead-reckoning estimate: composes odometry edges from the lowest pose id,
    /// falls back to any relative-pose edge for poses odometry does not reach,
    /// and places landmarks from their first observation.
    pub fn odometry_estimate(&self) -> Estimate {
        let d = self.d;
        let mut poses: BTreeMap<PoseId, Pose> = BTreeMap::new();
        let mut adj: BTreeMap<PoseId, Vec<(usize, bool)>> = BTreeMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            if let EdgeKind::RelativePose { from, to, .. } = e.kind {
                adj.entry(from).or_default().push((k, true));
                adj.entry(to).or_default().push((k, false));
            }
        }
        let mut seen: BTreeSet<PoseId> = BTreeSet::new();
        let mut queue = VecDeque::new();
        let expand = |poses: &mut BTreeMap<PoseId, Pose>,
                          seen: &mut BTreeSet<PoseId>,
                          queue: &mut VecDeque<PoseId>,
                          odometry_only: bool| {
            while let Some(u) = queue.pop_front() {
                let Some(list) = adj.get(&u) else { continue };
                for &(k, outgoing) in list {
                    let e = &self.edges[k];
                    if odometry_only && e.class != EdgeClass::Odometry {
                        continue;
                    }
                    let EdgeKind::RelativePose { from, to, rotation, translation, .. } = &e.kind else {
                        continue;
                    };
                    let (v, next) = if outgoing {
                        (*to, poses[&u].compose(rotation, translation))
                    } else {
                        let rt = rotation.transpose();
                        let back_t = -(&rt * translation);
                        (*from, poses[&u].compose(&rt, &back_t))
                    };
                    if seen.insert(v) {
                        poses.insert(v, next);
                        queue.push_back(v);
                    }
                }
            }
        };
        if let Some(&root) = self.poses.keys().next() {
            poses.insert(root, Pose::identity(d));
            seen.insert(root);
            queue.push_back(root);
            expand(&mut poses, &mut seen, &mut queue, true);
            // Extend the odometry chain through any relative-pose edge.
            queue.extend(seen.iter().copied());
            expand(&mut poses, &mut seen, &mut queue, false);
        }
        for &id in self.poses.keys() {
            if seen.insert(id) {
                poses.insert(id, Pose::identity(d));
                queue.push_back(id);
                expand(&mut poses, &mut seen, &mut queue, false);
            }
        }
        let mut landmarks = BTreeMap::new();
        for e in &self.edges {
            if let EdgeKind::PoseLandmark { pose, landmark, position, .. } = &e.kind {
                if landmarks.contains_key(landmark) {
                    continue;
                }
                if let Some(p) = poses.get(pose) {
                    landmarks.insert(*landmark, &p.translation + &p.rotation * position);
                }
            }
        }
        for id in self.landmarks.keys() {
            landmarks.entry(*id).or_insert_with(|| DVector::zeros(d));
        }
        Estimate { d, poses, landmarks }
    }
}

/// A rank-d estimate in problem space.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub d: usize,
    pub poses: BTreeMap<PoseId, Pose>,
    pub landmarks: BTreeMap<LandmarkId, DVector<f64>>,
}

impl Estimate {
    pub fn pose(&self, id: PoseId) -> Result<&Pose, ProblemError> {
        self.poses.get(&id).ok_or_else(|| ProblemError::MissingEstimate(format!("pose {id}")))
    }

    pub fn landmark(&self, id: LandmarkId) -> Result<&DVector<f64>, ProblemError> {
        self.landmarks.get(&id).ok_or_else(|| ProblemError::MissingEstimate(format!("landmark {id}")))
    }

    /// Applies `x ↦ R x + t` to every pose and landmark.
    pub fn transformed(&self, r: &DMatrix<f64>, t: &DVector<f64>) -> Estimate {
        Estimate {
            d: self.d,
            poses: self
                .poses
                .iter()
                .map(|(&id, p)| {
                    (id, Pose { rotation: r * &p.rotation, translation: r * &p.translation + t })
                })
                .collect(),
            landmarks: self.landmarks.iter().map(|(&id, l)| (id, r * l + t)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_loop() -> Problem {
        let mut p = Problem::new(2).unwrap();
        let gt: Vec<Pose> = (0..4)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_2;
                Pose::planar(a.cos(), a.sin(), a + std::f64::consts::FRAC_PI_2)
            })
            .collect();
        for (i, pose) in gt.iter().enumerate() {
            p.poses.insert(i as u64, pose.clone());
        }
        for i in 0..4 {
            let j = (i + 1) % 4;
            let (r, t) = gt[i].between(&gt[j]);
            let class = if j == i + 1 { EdgeClass::Odometry } else { EdgeClass::LoopClosure };
            p.edges.push(MeasurementEdge::relative_pose(i as u64, j as u64, r, t, 1.0, 1.0, class));
        }
        p
    }

    #[test]
    fn exact_measurements_have_zero_cost() {
        let p = square_loop();
        p.validate().unwrap();
        assert!(p.cost(&p.values()).unwrap() < 1e-24);
    }

    #[test]
    fn odometry_reproduces_ground_truth_up_to_gauge() {
        let p = square_loop();
        let est = p.odometry_estimate();
        // Odometry anchors pose 0 at identity; the cost is gauge invariant.
        assert!(p.cost(&est).unwrap() < 1e-20);
        assert_eq!(est.poses[&0], Pose::identity(2));
    }

    #[test]
    fn landmark_residual_scales_with_precision() {
        let mut p = Problem::new(2).unwrap();
        p.poses.insert(0, Pose::identity(2));
        p.landmarks.insert(0, DVector::from_vec(vec![1.0, 0.0]));
        p.edges.push(MeasurementEdge::pose_landmark(0, 0, DVector::from_vec(vec![1.5, 0.0]), 4.0));
        let r2 = p.edges[0].squared_residual(&p.values()).unwrap();
        assert!((r2.sqrt() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quaternion_round_trip() {
        let r = axis_angle3(Vector3::new(0.3, -1.0, 0.2), 1.1);
        let q = matrix_to_quat(&r);
        let back = quat_to_matrix(q[0], q[1], q[2], q[3]);
        assert!((back - r).norm() < 1e-14);
    }

    #[test]
    fn validation_catches_dangling_reference() {
        let mut p = square_loop();
        p.poses.remove(&3);
        assert!(matches!(p.validate(), Err(ProblemError::MissingPose { .. })));
    }
}
