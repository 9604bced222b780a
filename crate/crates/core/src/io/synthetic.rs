//! Synthetic ring and grid worlds with noisy relative measurements.

use nalgebra::{DMatrix, DVector, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{axis_angle3, rot2, EdgeClass, MeasurementEdge, Pose, Problem};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    /// Poses evenly spaced on a circle with unit step length.
    Ring,
    /// Boustrophedon path over a square grid with unit spacing.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub poses: usize,
    pub world: World,
    pub sigma_r: f64,
    pub sigma_t: f64,
    /// Probability of a loop closure per eligible pose pair.
    pub lc_prob: f64,
    /// Eligible pairs are non-consecutive poses within this distance.
    pub lc_radius: f64,
    pub landmarks: usize,
    /// Poses observe landmarks within this distance.
    pub obs_radius: f64,
    /// Each landmark is observed by at least this many poses (nearest first).
    pub min_observations: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d: 2,
            poses: 20,
            world: World::Ring,
            sigma_r: 0.01,
            sigma_t: 0.05,
            lc_prob: 0.5,
            lc_radius: 3.0,
            landmarks: 0,
            obs_radius: 3.0,
            min_observations: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Spec(m.to_string()));
        if self.d != 2 && self.d != 3 {
            return bad("d must be 2 or 3");
        }
        if self.poses < 2 {
            return bad("at least two poses are required");
        }
        if !(self.sigma_r >= 0.0 && self.sigma_t >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.lc_prob) {
            return bad("lc_prob must lie in [0, 1]");
        }
        if self.landmarks > 0 && self.min_observations > self.poses {
            return bad("min_observations exceeds the pose count");
        }
        Ok(())
    }

    /// `(κ, τ)`; a zero noise level maps to unit precision.
    pub fn precisions(&self) -> (f64, f64) {
        let p = |s: f64| if s > 0.0 { 1.0 / (s * s) } else { 1.0 };
        (p(self.sigma_r), p(self.sigma_t))
    }
}

fn yaw(d: usize, theta: f64) -> DMatrix<f64> {
    if d == 2 {
        rot2(theta)
    } else {
        axis_angle3(Vector3::z(), theta)
    }
}

fn planar_point(d: usize, x: f64, y: f64) -> DVector<f64> {
    let mut t = DVector::zeros(d);
    t[0] = x;
    t[1] = y;
    t
}

fn trajectory(spec: &SyntheticSpec) -> Vec<Pose> {
    let n = spec.poses;
    let d = spec.d;
    match spec.world {
        World::Ring => {
            let radius = 1.0 / (2.0 * (std::f64::consts::PI / n as f64).sin());
            (0..n)
                .map(|i| {
                    let a = i as f64 / n as f64 * std::f64::consts::TAU;
                    Pose {
                        rotation: yaw(d, a + std::f64::consts::FRAC_PI_2),
                        translation: planar_point(d, radius * a.cos(), radius * a.sin()),
                    }
                })
                .collect()
        }
        World::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let cells: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    let c = if r % 2 == 0 { c } else { cols - 1 - c };
                    (c as f64, r as f64)
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (x, y) = cells[i];
                    // Heading towards the next cell; the last pose keeps the previous heading.
                    let (a, b) = if i + 1 < n { (cells[i], cells[i + 1]) } else { (cells[i - 1], cells[i]) };
                    let heading = (b.1 - a.1).atan2(b.0 - a.0);
                    Pose { rotation: yaw(d, heading), translation: planar_point(d, x, y) }
                })
                .collect()
        }
    }
}

/// Rotation noise: angle `∼ N(0, σ_R)` about a uniformly random axis in 3D.
fn rotation_noise<R: Rng + ?Sized>(d: usize, sigma: f64, rng: &mut R) -> DMatrix<f64> {
    let angle = sigma * rng.sample::<f64, _>(StandardNormal);
    if d == 2 {
        return rot2(angle);
    }
    let axis = loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-9 {
            break Unit::new_normalize(v);
        }
    };
    axis_angle3(axis.into_inner(), angle)
}

fn translation_noise<R: Rng + ?Sized>(d: usize, sigma: f64, rng: &mut R) -> DVector<f64> {
    let n = Normal::new(0.0, sigma).expect("nonnegative sigma");
    DVector::from_fn(d, |_, _| n.sample(rng))
}

/// Noisy relative measurement `(R̃, t̃)` of `b` seen from `a`.
fn measure<R: Rng + ?Sized>(a: &Pose, b: &Pose, spec: &SyntheticSpec, rng: &mut R) -> (DMatrix<f64>, DVector<f64>) {
    let (r, t) = a.between(b);
    let rn = rotation_noise(spec.d, spec.sigma_r, rng);
    let tn = translation_noise(spec.d, spec.sigma_t, rng);
    (r * rn, t + tn)
}

/// Generates a problem whose pose and landmark values are the ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Problem, SyntheticError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Generation);
    let d = spec.d;
    let n = spec.poses;
    let (kappa, tau) = spec.precisions();
    let truth = trajectory(spec);
    let mut problem = Problem::new(d).expect("validated dimension");
    problem.meta.source = format!("synthetic:{:?}:{}", spec.world, n).to_lowercase();
    for (i, p) in truth.iter().enumerate() {
        problem.poses.insert(i as u64, p.clone());
    }
    let sequential: Vec<(usize, usize)> = match spec.world {
        World::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        World::Grid => (0..n - 1).map(|i| (i, i + 1)).collect(),
    };
    for &(i, j) in &sequential {
        let (r, t) = measure(&truth[i], &truth[j], spec, &mut rng);
        problem.edges.push(MeasurementEdge::relative_pose(i as u64, j as u64, r, t, kappa, tau, EdgeClass::Odometry));
    }
    let linked: std::collections::HashSet<(usize, usize)> = sequential.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let adjacent = |i: usize, j: usize| linked.contains(&(i.min(j), i.max(j)));
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacent(i, j) || (&truth[i].translation - &truth[j].translation).norm() > spec.lc_radius {
                continue;
            }
            if rng.random::<f64>() < spec.lc_prob {
                let (r, t) = measure(&truth[i], &truth[j], spec, &mut rng);
                problem.edges.push(MeasurementEdge::relative_pose(
                    i as u64,
                    j as u64,
                    r,
                    t,
                    kappa,
                    tau,
                    EdgeClass::LoopClosure,
                ));
            }
        }
    }
    if spec.landmarks > 0 {
        add_landmarks(&mut problem, &truth, spec, tau, &mut rng);
    }
    Ok(problem)
}

fn add_landmarks<R: Rng + ?Sized>(problem: &mut Problem, truth: &[Pose], spec: &SyntheticSpec, tau: f64, rng: &mut R) {
    let d = spec.d;
    let mut lo = DVector::from_element(d, f64::INFINITY);
    let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
    for p in truth {
        lo = lo.inf(&p.translation);
        hi = hi.sup(&p.translation);
    }
    for k in 0..d {
        // Flat trajectories get a unit slab so landmarks are not coplanar with every pose.
        lo[k] -= 1.0;
        hi[k] += 1.0;
    }
    for l in 0..spec.landmarks {
        let pos = DVector::from_fn(d, |k, _| rng.random_range(lo[k]..hi[k]));
        let mut by_dist: Vec<(f64, usize)> =
            truth.iter().enumerate().map(|(i, p)| ((&p.translation - &pos).norm(), i)).collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut observers: Vec<usize> = by_dist
            .iter()
            .enumerate()
            .filter(|(rank, (dist, _))| *dist <= spec.obs_radius || *rank < spec.min_observations)
            .map(|(_, &(_, i))| i)
            .collect();
        observers.sort_unstable();
        for i in observers {
            let p = &truth[i];
            let local = p.rotation.transpose() * (&pos - &p.translation);
            let meas = local + translation_noise(d, spec.sigma_t, rng);
            problem.edges.push(MeasurementEdge::pose_landmark(i as u64, l as u64, meas, tau));
        }
        problem.landmarks.insert(l as u64, pos);
    }
}
