//! Absolute trajectory error after rigid alignment.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::{rotation_angle_between, Estimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AteError {
    #[error("variable sets differ: {0}")]
    IdMismatch(String),
    #[error("alignment needs at least d + 1 non-degenerate positions")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub translation_rmse: f64,
    pub rotation_rmse_deg: f64,
    /// Maps estimate coordinates onto ground truth: `x ↦ R·x + t`.
    pub r_align: DMatrix<f64>,
    pub t_align: DVector<f64>,
}

/// Rigid `(R, t)` with `R ∈ SO(d)` minimizing `Σ‖R·a_i + t − b_i‖²`.
pub fn procrustes(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<(DMatrix<f64>, DVector<f64>), AteError> {
    let d = a.first().map(|v| v.len()).ok_or(AteError::Degenerate)?;
    if a.len() != b.len() || a.len() < d + 1 {
        return Err(AteError::Degenerate);
    }
    let n = a.len() as f64;
    let ma = a.iter().fold(DVector::zeros(d), |s, v| s + v) / n;
    let mb = b.iter().fold(DVector::zeros(d), |s, v| s + v) / n;
    let mut h = DMatrix::zeros(d, d);
    for (x, y) in a.iter().zip(b) {
        h += (x - &ma) * (y - &mb).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    // Rank ≥ d − 1 pins the rotation once the determinant is fixed.
    if d >= 2 && sv[d - 2] <= 1e-12 * sv[0].max(1e-300) {
        return Err(AteError::Degenerate);
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let v = vt.transpose();
    let mut s = DMatrix::<f64>::identity(d, d);
    if (&v * u.transpose()).determinant() < 0.0 {
        // Flip the direction with the smallest singular value.
        let kmin = (0..d).min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j])).unwrap_or(d - 1);
        s[(kmin, kmin)] = -1.0;
    }
    let r = v * s * u.transpose();
    let t = mb - &r * ma;
    Ok((r, t))
}

/// RMSE-ATE: aligns pose positions, then reports position RMSE over poses and
/// landmarks and rotation RMSE (degrees) over poses.
pub fn rmse_ate(estimate: &Estimate, truth: &Estimate) -> Result<AteResult, AteError> {
    let ids = |e: &Estimate| (e.poses.keys().copied().collect::<Vec<_>>(), e.landmarks.keys().copied().collect::<Vec<_>>());
    if ids(estimate) != ids(truth) {
        return Err(AteError::IdMismatch(format!(
            "{} poses / {} landmarks vs {} poses / {} landmarks",
            estimate.poses.len(),
            estimate.landmarks.len(),
            truth.poses.len(),
            truth.landmarks.len()
        )));
    }
    let a: Vec<DVector<f64>> = estimate.poses.values().map(|p| p.translation.clone()).collect();
    let b: Vec<DVector<f64>> = truth.poses.values().map(|p| p.translation.clone()).collect();
    let (r, t) = procrustes(&a, &b)?;
    let aligned = estimate.transformed(&r, &t);
    let mut sq = 0.0;
    let mut count = 0usize;
    for (id, p) in &aligned.poses {
        sq += (&p.translation - &truth.poses[id].translation).norm_squared();
        count += 1;
    }
    for (id, l) in &aligned.landmarks {
        sq += (l - &truth.landmarks[id]).norm_squared();
        count += 1;
    }
    let rot_sq: f64 = aligned
        .poses
        .iter()
        .map(|(id, p)| rotation_angle_between(&p.rotation, &truth.poses[id].rotation).to_degrees().powi(2))
        .sum();
    Ok(AteResult {
        translation_rmse: (sq / count as f64).sqrt(),
        rotation_rmse_deg: (rot_sq / aligned.poses.len() as f64).sqrt(),
        r_align: r,
        t_align: t,
    })
}
