//! Ground-truth sidecar: a whitespace table with one variable per line.
//!
//! Pose lines are `id x y theta` (2D) or `id x y z qx qy qz qw` (3D); landmark
//! lines are `landmark id x y [z]`. Lines starting with `#` are comments.

use std::fmt::Write as _;

use nalgebra::DVector;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::problem::{angle2, matrix_to_quat, quat_to_matrix, Estimate, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SidecarError {
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("sidecar holds no poses")]
    Empty,
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_ground_truth(est: &Estimate) -> String {
    let mut out = String::from("# ground truth\n");
    for (id, p) in &est.poses {
        let t = &p.translation;
        if est.d == 2 {
            let _ = writeln!(out, "{id} {} {} {}", fmt(t[0]), fmt(t[1]), fmt(angle2(&p.rotation)));
        } else {
            let q = matrix_to_quat(&p.rotation);
            let fields: Vec<String> = t.iter().chain(q.iter()).map(|&v| fmt(v)).collect();
            let _ = writeln!(out, "{id} {}", fields.join(" "));
        }
    }
    for (id, l) in &est.landmarks {
        let fields: Vec<String> = l.iter().map(|&v| fmt(v)).collect();
        let _ = writeln!(out, "landmark {id} {}", fields.join(" "));
    }
    out
}

pub fn parse_ground_truth(text: &str) -> Result<Estimate, SidecarError> {
    let mut d: Option<usize> = None;
    let mut poses = BTreeMap::new();
    let mut landmarks = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| SidecarError::Line { line: k + 1, reason };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (is_landmark, rest) = match tokens[0] {
            "landmark" => (true, &tokens[1..]),
            _ => (false, &tokens[..]),
        };
        let id: u64 = rest.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing or invalid id".into()))?;
        let vals: Vec<f64> = rest[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("cannot parse `{s}`"))))
            .collect::<Result<_, _>>()?;
        let dim = match (is_landmark, vals.len()) {
            (true, n @ (2 | 3)) => n,
            (false, 3) => 2,
            (false, 7) => 3,
            (_, n) => return Err(bad(format!("unexpected field count {n}"))),
        };
        if *d.get_or_insert(dim) != dim {
            return Err(bad("mixed dimensions".into()));
        }
        let fresh = if is_landmark {
            landmarks.insert(id, DVector::from_vec(vals)).is_none()
        } else if dim == 2 {
            poses.insert(id, Pose::planar(vals[0], vals[1], vals[2])).is_none()
        } else {
            let n = vals[3..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > crate::io::g2o::QUATERNION_TOL {
                return Err(bad(format!("quaternion norm {n}")));
            }
            let rotation = quat_to_matrix(vals[3] / n, vals[4] / n, vals[5] / n, vals[6] / n);
            poses.insert(id, Pose { rotation, translation: DVector::from_vec(vals[..3].to_vec()) }).is_none()
        };
        if !fresh {
            return Err(bad(format!("duplicate id {id}")));
        }
    }
    let d = d.filter(|_| !poses.is_empty()).ok_or(SidecarError::Empty)?;
    Ok(Estimate { d, poses, landmarks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn round_trip_2d_and_3d() {
        for (d, lm) in [(2, 5), (3, 0)] {
            let spec = SyntheticSpec { d, landmarks: lm, ..Default::default() };
            let gt = generate_synthetic(&spec, 1).unwrap().values();
            let back = parse_ground_truth(&write_ground_truth(&gt)).unwrap();
            assert_eq!(back.poses.len(), gt.poses.len());
            assert_eq!(back.landmarks, gt.landmarks);
            for (id, p) in &gt.poses {
                assert!((&p.rotation - &back.poses[id].rotation).norm() < 1e-12);
                assert_eq!(p.translation, back.poses[id].translation);
            }
        }
    }

    #[test]
    fn located_errors() {
        assert_eq!(
            parse_ground_truth("0 1 2 3\n1 1 2\n").unwrap_err(),
            SidecarError::Line { line: 2, reason: "unexpected field count 2".into() }
        );
        assert_eq!(parse_ground_truth("# nothing\n").unwrap_err(), SidecarError::Empty);
    }
}
