use serde::{Deserialize, Serialize};

use super::certificate::{certify, saddle_escape, CertificateResult, CertifierError};
use super::eigen::LanczosConfig;
use crate::factor_graph::{LiftedGraph, SparseDataMatrix};
use crate::manifolds::{lift_point, point_from_estimate, round_solution, ProductPoint};
use crate::problem::Estimate;
use crate::solver::{LocalSolver, SolverConfig};

/// Certificate slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eta {
    /// Multiple of `mean(|diag Q|)`.
    Relative(f64),
    Absolute(f64),
}

impl Eta {
    pub fn resolve(self, q: &SparseDataMatrix) -> f64 {
        match self {
            Eta::Absolute(e) => e,
            Eta::Relative(c) => {
                let n = q.n().max(1);
                c * q.q.diagonal().iter().map(|x| x.abs()).sum::<f64>() / n as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaircaseConfig {
    /// `None` starts at `d`.
    pub p0: Option<usize>,
    pub p_max: usize,
    pub eta: Eta,
    pub eig: LanczosConfig,
    pub solver: SolverConfig,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self {
            p0: None,
            p_max: 30,
            eta: Eta::Relative(1e-5),
            eig: LanczosConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: usize,
    pub cost: f64,
    pub lambda_min: f64,
    pub certified: bool,
    pub solver_iterations: usize,
    pub stationarity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct StaircaseResult {
    pub estimate: Estimate,
    pub f_sdp: Option<f64>,
    pub f_qcqp: f64,
    pub p_term: usize,
    pub certified: bool,
    pub eta: f64,
    pub trace: Vec<RankRecord>,
    /// Final lifted point at rank `p_term`.
    pub point: ProductPoint,
    pub certificate: CertificateResult,
}

/// Optimize, certify, and escape to higher rank until certified or `p_max`.
pub fn riemannian_staircase(
    g: &LiftedGraph,
    y0: &ProductPoint,
    cfg: &StaircaseConfig,
) -> Result<StaircaseResult, CertifierError> {
    let solver = LocalSolver::new(g.data_matrix(), cfg.solver.clone())?;
    staircase_with(&solver, y0, cfg)
}

/// Staircase over a prepared solver (its data matrix and preconditioner are reused).
pub fn staircase_with(
    solver: &LocalSolver,
    y0: &ProductPoint,
    cfg: &StaircaseConfig,
) -> Result<StaircaseResult, CertifierError> {
    let q = solver.data_matrix();
    let d = y0.d();
    let p0 = cfg.p0.unwrap_or(d).max(d);
    let eta = cfg.eta.resolve(q);
    let mut y = if y0.p() < p0 { lift_point(y0, p0)? } else { y0.clone() };
    let mut trace = Vec::new();
    loop {
        let res = solver.solve(&y)?;
        let p = res.point.p();
        let eig = LanczosConfig { seed: cfg.eig.seed.wrapping_add(p as u64), ..cfg.eig.clone() };
        let cert = certify(q, &res.point, eta, &eig);
        trace.push(RankRecord {
            rank: p,
            cost: res.cost,
            lambda_min: cert.lambda_min,
            certified: cert.certified,
            solver_iterations: res.iterations,
            stationarity_residual: cert.stationarity_residual,
        });
        let finished = cert.certified || p >= cfg.p_max;
        let escaped = if finished { None } else { saddle_escape(q, &res.point, &cert.v_min, cert.lambda_min).ok() };
        match escaped {
            Some(esc) => y = esc.point,
            None => {
                let estimate = round_solution(&res.point);
                let xd = point_from_estimate(res.point.layout.clone(), &estimate, d)?;
                let f_qcqp = q.cost(&xd.y);
                return Ok(StaircaseResult {
                    estimate,
                    f_sdp: cert.f_sdp,
                    f_qcqp,
                    p_term: p,
                    certified: cert.certified,
                    eta,
                    trace,
                    point: res.point,
                    certificate: cert,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::lift_graph;
    use crate::manifolds::random_point;
    use crate::problem::{EdgeClass, MeasurementEdge, Pose, Problem};
    use crate::rng::{stream_rng, Stream};

    fn noiseless_ring(n: u64) -> Problem {
        let mut p = Problem::new(2).unwrap();
        for i in 0..n {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            p.poses.insert(i, Pose::planar(4.0 * a.cos(), 4.0 * a.sin(), a));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let (r, t) = p.poses[&i].between(&p.poses[&j]);
            p.edges.push(MeasurementEdge::relative_pose(i, j, r, t, 1.0, 1.0, EdgeClass::Odometry));
        }
        p
    }

    #[test]
    fn noiseless_ring_certifies_with_zero_bound() {
        let p = noiseless_ring(5);
        let g = lift_graph(&p, 2).unwrap();
        let y0 = random_point(g.layout.clone(), 2, &mut stream_rng(1, Stream::Initialization));
        let cfg = StaircaseConfig { eta: Eta::Absolute(1e-8), ..Default::default() };
        let r = riemannian_staircase(&g, &y0, &cfg).unwrap();
        assert!(r.certified, "{:?} {:?}", r.trace, r.certificate.eig_converged);
        assert!(r.p_term <= 3);
        assert!(r.certificate.lambda_min >= -1e-8);
        assert!(r.f_sdp.unwrap().abs() <= 1e-9);
        assert!(r.f_qcqp <= 1e-9, "{} {:?} {:?}", r.f_qcqp, r.f_sdp, r.trace);
        assert!(r.f_sdp.unwrap() <= r.f_qcqp + 1e-9 * (1.0 + r.f_qcqp));
    }

    #[test]
    fn relative_eta_scales_with_diagonal() {
        let p = noiseless_ring(4);
        let g = lift_graph(&p, 2).unwrap();
        let q = g.data_matrix();
        let mean = q.q.diagonal().iter().sum::<f64>() / q.n() as f64;
        assert!((Eta::Relative(1e-5).resolve(&q) - 1e-5 * mean).abs() < 1e-18);
    }
}
