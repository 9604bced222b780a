//! Outlier injection: replaces a fraction of loop-closure and pose–landmark
//! measurements with random ones.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Quaternion};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{rot2, EdgeKind, Problem};
use crate::rng::{stream_rng, Rng as StreamRng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InjectError {
    #[error("outlier rate {0} outside [0, 1]")]
    Rate(f64),
}

/// A measurement in report form: row-major rotation (empty for landmark edges)
/// and translation or landmark position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub rotation: Vec<f64>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEdge {
    pub edge: usize,
    pub original: MeasurementRecord,
    pub corrupted: MeasurementRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub rate: f64,
    pub seed: u64,
    /// Number of eligible (non-odometry) edges.
    pub eligible: usize,
    /// Replaced edge indices, ascending.
    pub replaced: Vec<usize>,
    pub edges: Vec<InjectedEdge>,
}

/// `⌊βL + ½⌋`.
pub fn outlier_count(rate: f64, eligible: usize) -> usize {
    (rate * eligible as f64 + 0.5).floor() as usize
}

fn record(kind: &EdgeKind) -> MeasurementRecord {
    match kind {
        EdgeKind::RelativePose { rotation, translation, .. } => MeasurementRecord {
            rotation: rotation.transpose().as_slice().to_vec(),
            vector: translation.as_slice().to_vec(),
        },
        EdgeKind::PoseLandmark { position, .. } => {
            MeasurementRecord { rotation: Vec::new(), vector: position.as_slice().to_vec() }
        }
    }
}

pub fn uniform_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    if d == 2 {
        return rot2(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    }
    let q = loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            break UnitQuaternion::from_quaternion(Quaternion::new(v[3], v[0], v[1], v[2]));
        }
    };
    let m = q.to_rotation_matrix();
    DMatrix::from_fn(3, 3, |r, c| m[(r, c)])
}

/// Uniform point in the `d`-ball of the given radius.
pub fn uniform_in_ball<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> DVector<f64> {
    let dir = loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            break v / n;
        }
    };
    dir * radius * rng.random::<f64>().powf(1.0 / d as f64)
}

fn corrupt(kind: &mut EdgeKind, d: usize, radius: f64, rng: &mut StreamRng) {
    match kind {
        EdgeKind::RelativePose { rotation, translation, .. } => {
            *rotation = uniform_rotation(d, rng);
            *translation = uniform_in_ball(d, radius, rng);
        }
        EdgeKind::PoseLandmark { position, .. } => *position = uniform_in_ball(d, radius, rng),
    }
}

/// Replaces `⌊βL + ½⌋` of the `L` non-odometry edges, chosen uniformly without
/// replacement. Precisions and odometry are left untouched.
pub fn inject_outliers(problem: &Problem, rate: f64, seed: u64) -> Result<(Problem, InjectionReport), InjectError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(InjectError::Rate(rate));
    }
    let eligible = problem.robust_edges();
    let count = outlier_count(rate, eligible.len());
    let mut rng = stream_rng(seed, Stream::Injection);
    let mut replaced: Vec<usize> = sample(&mut rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect();
    replaced.sort_unstable();
    let radius = problem.scene_scale();
    let mut out = problem.clone();
    let mut edges = Vec::with_capacity(count);
    for &k in &replaced {
        let original = record(&out.edges[k].kind);
        corrupt(&mut out.edges[k].kind, problem.d, radius, &mut rng);
        edges.push(InjectedEdge { edge: k, original, corrupted: record(&out.edges[k].kind) });
    }
    Ok((out, InjectionReport { rate, seed, eligible: eligible.len(), replaced, edges }))
}

/// Precision and recall of a detected outlier set against the injected one.
/// Empty sets count as perfect.
pub fn precision_recall(detected: &[usize], injected: &[usize]) -> (f64, f64) {
    let hits = detected.iter().filter(|e| injected.contains(e)).count() as f64;
    let precision = if detected.is_empty() { 1.0 } else { hits / detected.len() as f64 };
    let recall = if injected.is_empty() { 1.0 } else { hits / injected.len() as f64 };
    (precision, recall)
}
