use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::eigen::{min_eigenpair, EigenError, LanczosConfig, SymmetricOperator};
use crate::factor_graph::SparseDataMatrix;
use crate::linalg::{sym, EnvelopeCholesky, LinalgError, Ordering, SymmetricCsr};
use crate::manifolds::{lift_point, retract, ManifoldError, ProductPoint, TangentVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifierError {
    #[error("saddle escape failed: no sufficient decrease after {0} step halvings")]
    EscapeFailed(usize),
    #[error("escape direction has wrong length {got} (expected {expected})")]
    Direction { expected: usize, got: usize },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Solver(#[from] crate::solver::SolverError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `Λ_i = Sym((QY)_i·Y_iᵀ)` for every Stiefel block, in layout order.
pub fn multipliers_from_product(qy: &DMatrix<f64>, y: &ProductPoint) -> Vec<DMatrix<f64>> {
    y.layout
        .stiefel_blocks()
        .map(|b| {
            let g = qy.rows(b.offset, b.rows);
            let yi = y.y.rows(b.offset, b.rows);
            sym(&(g * yi.transpose()))
        })
        .collect()
}

/// Blockwise least-squares Lagrange multipliers at `Y`.
pub fn recover_multipliers(q: &SparseDataMatrix, y: &ProductPoint) -> Vec<DMatrix<f64>> {
    multipliers_from_product(&q.mul(&y.y), y)
}

/// Implicit certificate `S = Q − BlockDiag(Λ)`.
#[derive(Debug, Clone)]
pub struct Certificate {
    s: SymmetricCsr,
}

pub fn build_certificate(q: &SparseDataMatrix, lambda: &[DMatrix<f64>]) -> Certificate {
    // Q's structural pattern already contains every Stiefel diagonal block.
    let mut s = q.q.clone();
    for (b, l) in q.layout.stiefel_blocks().zip(lambda) {
        for r in 0..b.rows {
            for c in r..b.rows {
                let pos = s.position(b.offset + r, b.offset + c).expect("diagonal block in pattern");
                s.values_mut()[pos] -= l[(r, c)];
            }
        }
    }
    Certificate { s }
}

impl Certificate {
    pub fn matrix(&self) -> &SymmetricCsr {
        &self.s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.s.to_dense()
    }

    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.s.mul_mat(x)
    }

    /// Tests `S + ηI ≻ 0` by attempting a sparse Cholesky factorization.
    pub fn is_psd_with_slack(&self, eta: f64) -> bool {
        let ordering = Ordering::reverse_cuthill_mckee(&self.s);
        EnvelopeCholesky::factor(&self.s, &ordering, eta).is_ok()
    }
}

impl SymmetricOperator for Certificate {
    fn dim(&self) -> usize {
        self.s.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.s.mul_slice(x, out);
    }

    fn gershgorin_upper(&self) -> f64 {
        self.s.gershgorin_upper()
    }
}

#[derive(Debug, Clone)]
pub struct CertificateResult {
    pub lambda_blocks: Vec<DMatrix<f64>>,
    pub lambda_min: f64,
    pub v_min: DVector<f64>,
    pub certified: bool,
    /// `‖S·Y‖_F`.
    pub stationarity_residual: f64,
    /// `⟨Q, YYᵀ⟩` at the certified point.
    pub f_attained: f64,
    /// Lower bound on the relaxation optimum; present only when certified.
    pub f_sdp: Option<f64>,
    /// The more conservative bound `f_attained − η·n`, kept for diagnostics.
    pub f_sdp_slack_bound: f64,
    pub eta: f64,
    /// False when the eigensolver ran out of budget and the sign test fell back
    /// to a Cholesky factorization of `S + ηI`.
    pub eig_converged: bool,
    pub matvecs: usize,
}

/// Certifies `Y` when `λ_min(S) ≥ −η`, otherwise returns a negative-curvature direction.
pub fn certify(q: &SparseDataMatrix, y: &ProductPoint, eta: f64, eig: &LanczosConfig) -> CertificateResult {
    let qy = q.mul(&y.y);
    let f_attained = y.y.dot(&qy);
    let lambda_blocks = multipliers_from_product(&qy, y);
    let s = build_certificate(q, &lambda_blocks);
    let stationarity_residual = s.mul(&y.y).norm();
    let cfg = LanczosConfig { stop_below: Some(-eta), ..eig.clone() };
    let n = q.n();
    let (lambda_min, v_min, certified, eig_converged, matvecs) = match min_eigenpair(&s, &cfg) {
        Ok(pair) => {
            let certified = !pair.early_stop && pair.value >= -eta;
            (pair.value, pair.vector, certified, true, pair.matvecs)
        }
        Err(EigenError::NotConverged { best }) => {
            // The Ritz value only bounds λ_min from above; settle the sign exactly.
            let certified = best.value >= -eta && s.is_psd_with_slack(eta);
            if certified {
                (best.value, best.vector, true, false, best.matvecs)
            } else {
                let deeper = LanczosConfig { max_matvecs: cfg.max_matvecs * 4, ..cfg.clone() };
                match min_eigenpair(&s, &deeper) {
                    Ok(p) => (p.value, p.vector, false, !p.early_stop, p.matvecs + best.matvecs),
                    Err(EigenError::NotConverged { best: b }) => (b.value, b.vector, false, false, b.matvecs + best.matvecs),
                    Err(EigenError::Empty) => (0.0, DVector::zeros(0), true, true, 0),
                }
            }
        }
        Err(EigenError::Empty) => (0.0, DVector::zeros(0), true, true, 0),
    };
    CertificateResult {
        lambda_blocks,
        lambda_min,
        v_min,
        certified,
        stationarity_residual,
        f_attained,
        f_sdp: certified.then_some(f_attained),
        f_sdp_slack_bound: f_attained - eta * n as f64,
        eta,
        eig_converged,
        matvecs,
    }
}

#[derive(Debug, Clone)]
pub struct EscapeResult {
    pub point: ProductPoint,
    pub cost: f64,
    pub step: f64,
    pub halvings: usize,
}

const ESCAPE_DECREASE: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Lifts `Y` to rank `p+1` and steps along `v_min` placed in the new column.
pub fn saddle_escape(
    q: &SparseDataMatrix,
    y: &ProductPoint,
    v_min: &DVector<f64>,
    lambda_min: f64,
) -> Result<EscapeResult, CertifierError> {
    if v_min.len() != y.y.nrows() {
        return Err(CertifierError::Direction { expected: y.y.nrows(), got: v_min.len() });
    }
    let f0 = q.cost(&y.y);
    let p = y.p();
    let lifted = lift_point(y, p + 1)?;
    let mut dir = TangentVector::zeros(lifted.layout.clone(), p + 1);
    dir.v.set_column(p, v_min);
    let mut alpha = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let cand = retract(&lifted, &dir, alpha)?;
        let cost = q.cost(&cand.y);
        if cost < f0 && cost <= f0 - ESCAPE_DECREASE * alpha * alpha * lambda_min.abs() {
            return Ok(EscapeResult { point: cand, cost, step: alpha, halvings });
        }
        alpha *= 0.5;
    }
    Err(CertifierError::EscapeFailed(MAX_HALVINGS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::lift_graph;
    use crate::manifolds::{random_point, BlockKind, Layout, VarKey};
    use crate::problem::{rot2, EdgeClass, MeasurementEdge, Pose, Problem};
    use crate::rng::{stream_rng, Stream};
    use crate::solver::{LocalSolver, SolverConfig};
    use rand::Rng;
    use std::sync::Arc;

    /// True when every Stiefel block of the escape direction is zero in the old columns.
    fn is_new_column_only(d: &TangentVector, p: usize) -> bool {
        d.layout.blocks.iter().filter(|b| b.kind == BlockKind::Stiefel).all(|b| {
            d.v.view((b.offset, 0), (b.rows, p)).iter().all(|&x| x == 0.0)
        })
    }

    fn small_problem(seed: u64, poses: u64) -> Problem {
        let mut rng = stream_rng(seed, Stream::Generation);
        let mut p = Problem::new(2).unwrap();
        for i in 0..poses {
            p.poses.insert(i, Pose::planar(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
        }
        for i in 0..poses {
            let j = (i + 1) % poses;
            let (_, t) = p.poses[&i].between(&p.poses[&j]);
            let class = if j == i + 1 { EdgeClass::Odometry } else { EdgeClass::LoopClosure };
            p.edges.push(MeasurementEdge::relative_pose(i, j, rot2(rng.random_range(-3.0..3.0)), t, 2.0, 1.0, class));
        }
        p
    }

    #[test]
    fn euclidean_only_has_no_multipliers() {
        let layout = Arc::new(Layout::new(2, [VarKey::Landmark(0), VarKey::Landmark(1)]));
        let mut csr = SymmetricCsr::from_pattern(2, [(0, 0), (0, 1), (1, 1)]);
        csr.values_mut().copy_from_slice(&[2.0, -1.0, 2.0]);
        let q = SparseDataMatrix { layout: layout.clone(), q: csr };
        let y = random_point(layout, 2, &mut stream_rng(0, Stream::Initialization));
        let lam = recover_multipliers(&q, &y);
        assert!(lam.is_empty());
        assert_eq!(build_certificate(&q, &lam).to_dense(), q.q.to_dense());
    }

    #[test]
    fn zero_multipliers_reproduce_q_and_s_is_symmetric() {
        let p = small_problem(1, 5);
        let g = lift_graph(&p, 3).unwrap();
        let q = g.data_matrix();
        let zeros = vec![DMatrix::zeros(2, 2); 5];
        let s0 = build_certificate(&q, &zeros);
        let mut rng = stream_rng(2, Stream::Initialization);
        for _ in 0..20 {
            let x = DMatrix::from_fn(q.n(), 1, |_, _| rng.random_range(-1.0..1.0));
            assert!((s0.mul(&x) - q.mul(&x)).norm() <= 1e-14 * (1.0 + x.norm()));
        }
        let y = random_point(g.layout.clone(), 3, &mut rng);
        let s = build_certificate(&q, &recover_multipliers(&q, &y));
        let u = DMatrix::from_fn(q.n(), 1, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(q.n(), 1, |_, _| rng.random_range(-1.0..1.0));
        let a = u.dot(&s.mul(&v));
        let b = s.mul(&u).dot(&v);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn dense_certificate_matches_blockwise_formula() {
        let p = small_problem(3, 6);
        let g = lift_graph(&p, 2).unwrap();
        let q = g.data_matrix();
        let y = random_point(g.layout.clone(), 2, &mut stream_rng(3, Stream::Initialization));
        let qd = q.q.to_dense();
        let qy = &qd * &y.y;
        let mut oracle = qd.clone();
        for b in g.layout.stiefel_blocks() {
            let gi = qy.rows(b.offset, 2);
            let yi = y.y.rows(b.offset, 2);
            let m = gi * yi.transpose();
            let l = (&m + m.transpose()) * 0.5;
            let mut blk = oracle.view_mut((b.offset, b.offset), (2, 2));
            blk -= l;
        }
        let s = build_certificate(&q, &recover_multipliers(&q, &y)).to_dense();
        assert!((s - oracle).norm() < 1e-12 * (1.0 + qd.norm()));
    }

    #[test]
    fn multipliers_match_dense_least_squares() {
        // Two poses: solve min_Λ ‖QY − BlockDiag(Λ)Y‖ over symmetric Λ by
        // stacking the KKT residual as a dense linear system in the free entries.
        let p = small_problem(4, 2);
        let g = lift_graph(&p, 3).unwrap();
        let q = g.data_matrix();
        let y = random_point(g.layout.clone(), 3, &mut stream_rng(4, Stream::Initialization));
        let qy = q.mul(&y.y);
        let blocks: Vec<_> = g.layout.stiefel_blocks().cloned().collect();
        for (bi, b) in blocks.iter().enumerate() {
            // Unknowns (λ00, λ01, λ11).
            let yi = y.y.rows(b.offset, 2).into_owned();
            let target = qy.rows(b.offset, 2).into_owned();
            let mut a = DMatrix::zeros(6, 3);
            let mut rhs = DVector::zeros(6);
            for r in 0..2 {
                for c in 0..3 {
                    let row = r * 3 + c;
                    rhs[row] = target[(r, c)];
                    if r == 0 {
                        a[(row, 0)] = yi[(0, c)];
                        a[(row, 1)] = yi[(1, c)];
                    } else {
                        a[(row, 1)] = yi[(0, c)];
                        a[(row, 2)] = yi[(1, c)];
                    }
                }
            }
            let sol = a.clone().svd(true, true).solve(&rhs, 1e-14).unwrap();
            let lam = &recover_multipliers(&q, &y)[bi];
            let expect = DMatrix::from_row_slice(2, 2, &[sol[0], sol[1], sol[1], sol[2]]);
            assert!((lam - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn stationary_point_has_small_residual_and_escape_lowers_cost() {
        let p = small_problem(5, 8);
        let g = lift_graph(&p, 2).unwrap();
        let q = g.data_matrix();
        let solver = LocalSolver::new(q.clone(), SolverConfig { gradient_norm_tol: Some(1e-10), ..Default::default() }).unwrap();
        let y0 = random_point(g.layout.clone(), 2, &mut stream_rng(5, Stream::Initialization));
        let res = solver.solve(&y0).unwrap();
        let cert = certify(&q, &res.point, 1e-8, &LanczosConfig::default());
        assert!(cert.stationarity_residual <= 1e-6 * (1.0 + q.q.frobenius_norm()));
        assert!((cert.v_min.norm() - 1.0).abs() < 1e-10);
        let dense_min = build_certificate(&q, &cert.lambda_blocks).to_dense().symmetric_eigen().eigenvalues.min();
        assert_eq!(cert.certified, dense_min >= -1e-8 - 1e-9);
        if !cert.certified {
            let esc = saddle_escape(&q, &res.point, &cert.v_min, cert.lambda_min).unwrap();
            assert!(esc.cost < res.cost);
            assert_eq!(esc.point.p(), 3);
            assert!(esc.point.feasibility_error() < 1e-10);
        }
    }

    #[test]
    fn escape_direction_is_tangent() {
        let p = small_problem(6, 4);
        let g = lift_graph(&p, 2).unwrap();
        let y = random_point(g.layout.clone(), 2, &mut stream_rng(6, Stream::Initialization));
        let lifted = lift_point(&y, 3).unwrap();
        let mut d = TangentVector::zeros(lifted.layout.clone(), 3);
        d.v.set_column(2, &DVector::from_element(g.layout.n, 0.3));
        assert!(is_new_column_only(&d, 2));
        assert!(d.tangency_error(&lifted) == 0.0);
    }
}
