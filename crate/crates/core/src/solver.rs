//! Damped Riemannian Newton (Levenberg–Marquardt style) on the product manifold.
//!
//! Each iteration solves `(Hess f(Y) + λI)·η = −grad f(Y)` on the tangent space by
//! preconditioned truncated CG, retracts, and accepts the step only if the cost
//! decreases; otherwise `λ` grows and the system is re-solved. After an accepted
//! step `λ` shrinks when the model predicted the decrease well (gain ratio above
//! ¾) and grows when it did poorly (below ¼).

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certifier::{build_certificate, multipliers_from_product};
use crate::factor_graph::{LiftedGraph, SparseDataMatrix};
use crate::linalg::{EnvelopeCholesky, LinalgError, Ordering};
use crate::manifolds::{retract, BlockKind, Layout, ManifoldError, ProductPoint, TangentVector, FEASIBILITY_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("initial point is infeasible (error {0:e})")]
    Infeasible(f64),
    #[error("cost is not finite at the initial point")]
    NonFiniteCost,
    #[error("point layout does not match the data matrix")]
    Layout,
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("preconditioner factorization failed: {0}")]
    Preconditioner(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Sparse Cholesky of the damped certificate `S + (λ/2 + δ)I`, refactored
    /// every iteration, falling back to `Q + (λ/2 + δ)I` where `S` is indefinite.
    DampedCertificate,
    /// Sparse Cholesky of `Q + δI` in reverse Cuthill–McKee order, factored once.
    Cholesky,
    /// Inverse diagonal blocks of `Q + δI`.
    BlockJacobi,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub relative_cost_tol: f64,
    pub absolute_cost_tol: f64,
    /// `None` means `1e-8·(1 + |f₀|)`.
    pub gradient_norm_tol: Option<f64>,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_cg_iterations: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            relative_cost_tol: 1e-8,
            absolute_cost_tol: 1e-8,
            gradient_norm_tol: None,
            max_iterations: 100,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_cg_iterations: 500,
            preconditioner: Preconditioner::DampedCertificate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RelativeTol,
    AbsoluteTol,
    GradientTol,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub point: ProductPoint,
    pub cost: f64,
    pub iterations: usize,
    /// Cost at the initial point followed by every accepted iterate.
    pub cost_trace: Vec<f64>,
    pub termination: Termination,
    pub gradient_norm: f64,
}

const MAX_DAMPING: f64 = 1e16;

enum Precond {
    Damped(Ordering),
    Cholesky(EnvelopeCholesky),
    BlockJacobi(Vec<DMatrix<f64>>),
    Identity,
}

/// Preconditioner for one damped Newton system.
enum ActivePrecond<'a> {
    Factor(EnvelopeCholesky),
    Shared(&'a EnvelopeCholesky),
    Blocks(&'a [DMatrix<f64>]),
    Identity,
}

/// Local solver bound to one data matrix; the fill-reducing ordering (or the
/// static factor) is computed once and reused across solves, since the
/// staircase re-solves the same `Q` at several ranks.
pub struct LocalSolver {
    q: SparseDataMatrix,
    cfg: SolverConfig,
    precond: Precond,
    delta: f64,
}

impl LocalSolver {
    pub fn new(q: SparseDataMatrix, cfg: SolverConfig) -> Result<Self, SolverError> {
        let n = q.n();
        let diag = q.q.diagonal();
        let mean_diag = if n > 0 { diag.iter().map(|x| x.abs()).sum::<f64>() / n as f64 } else { 1.0 };
        let delta = 1e-6 * mean_diag.max(1e-12);
        let precond = match cfg.preconditioner {
            Preconditioner::DampedCertificate => Precond::Damped(Ordering::reverse_cuthill_mckee(&q.q)),
            Preconditioner::Cholesky => {
                let ordering = Ordering::reverse_cuthill_mckee(&q.q);
                match EnvelopeCholesky::factor(&q.q, &ordering, delta) {
                    Ok(f) => Precond::Cholesky(f),
                    // Roundoff in a near-singular Q: retry with a larger shift.
                    Err(_) => Precond::Cholesky(EnvelopeCholesky::factor(&q.q, &ordering, 1e-3 * mean_diag.max(1e-12))?),
                }
            }
            Preconditioner::BlockJacobi => Precond::BlockJacobi(block_jacobi(&q, delta)),
            Preconditioner::Identity => Precond::Identity,
        };
        Ok(Self { q, cfg, precond, delta })
    }

    pub fn data_matrix(&self) -> &SparseDataMatrix {
        &self.q
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn active_precond(&self, lam: &[DMatrix<f64>], lambda: f64) -> ActivePrecond<'_> {
        match &self.precond {
            Precond::Damped(ordering) => {
                let shift = 0.5 * lambda + self.delta;
                let s = build_certificate(&self.q, lam);
                EnvelopeCholesky::factor(s.matrix(), ordering, shift)
                    .or_else(|_| EnvelopeCholesky::factor(&self.q.q, ordering, shift))
                    .or_else(|_| EnvelopeCholesky::factor(&self.q.q, ordering, shift + 1e3 * self.delta))
                    .map_or(ActivePrecond::Identity, ActivePrecond::Factor)
            }
            Precond::Cholesky(f) => ActivePrecond::Shared(f),
            Precond::BlockJacobi(inv) => ActivePrecond::Blocks(inv),
            Precond::Identity => ActivePrecond::Identity,
        }
    }

    fn apply_precond(&self, pre: &ActivePrecond<'_>, y: &ProductPoint, r: &TangentVector) -> TangentVector {
        let z = match pre {
            ActivePrecond::Factor(f) => f.solve_mat(&r.v),
            ActivePrecond::Shared(f) => f.solve_mat(&r.v),
            ActivePrecond::Blocks(inv) => {
                let mut z = r.v.clone();
                for (b, m) in y.layout.blocks.iter().zip(inv.iter()) {
                    let blk = m * r.v.rows(b.offset, b.rows);
                    z.rows_mut(b.offset, b.rows).copy_from(&blk);
                }
                z
            }
            ActivePrecond::Identity => r.v.clone(),
        };
        y.project(&z)
    }

    pub fn solve(&self, y0: &ProductPoint) -> Result<SolveResult, SolverError> {
        if y0.y.nrows() != self.q.n() || *y0.layout != *self.q.layout {
            return Err(SolverError::Layout);
        }
        let feas = y0.feasibility_error();
        if !(feas <= FEASIBILITY_TOL) {
            return Err(SolverError::Infeasible(feas));
        }
        let cfg = &self.cfg;
        let mut y = y0.clone();
        let mut qy = self.q.mul(&y.y);
        let mut f = y.y.dot(&qy);
        if !f.is_finite() {
            return Err(SolverError::NonFiniteCost);
        }
        let gtol = cfg.gradient_norm_tol.unwrap_or(1e-8 * (1.0 + f.abs()));
        let mut lambda = cfg.initial_damping;
        let mut trace = vec![f];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let grad = y.project(&(&qy * 2.0));
            let gnorm = grad.norm();
            if gnorm <= gtol {
                return Ok(self.finish(y, f, iterations, trace, Termination::GradientTol, gnorm));
            }
            if iterations > cfg.max_iterations {
                return Ok(self.finish(y, f, iterations - 1, trace, Termination::MaxIterations, gnorm));
            }
            let lam_blocks = multipliers_from_product(&qy, &y);
            let mut accepted = None;
            while lambda <= MAX_DAMPING {
                let step = self.truncated_cg(&y, &lam_blocks, &grad, lambda);
                let cand = retract(&y, &step, 1.0)?;
                let cand_qy = self.q.mul(&cand.y);
                let cand_f = cand.y.dot(&cand_qy);
                if cand_f.is_finite() && cand_f < f {
                    // Gain ratio against the undamped quadratic model.
                    let predicted = -grad.inner(&step) - 0.5 * step.inner(&self.hessian(&y, &lam_blocks, &step));
                    let rho = if predicted > 0.0 { (f - cand_f) / predicted } else { 1.0 };
                    if rho > 0.75 {
                        lambda = (lambda / cfg.damping_decrease).max(1e-14);
                    } else if rho < 0.25 {
                        lambda *= cfg.damping_increase;
                    }
                    accepted = Some((cand, cand_qy, cand_f));
                    break;
                }
                lambda *= cfg.damping_increase;
            }
            let Some((cand, cand_qy, cand_f)) = accepted else {
                // No decrease at any damping level: numerically stationary.
                return Ok(self.finish(y, f, iterations, trace, Termination::RelativeTol, gnorm));
            };
            let decrease = f - cand_f;
            y = cand;
            qy = cand_qy;
            let prev = f;
            f = cand_f;
            trace.push(f);
            if decrease <= cfg.relative_cost_tol * prev.abs() {
                let gnorm = y.project(&(&qy * 2.0)).norm();
                return Ok(self.finish(y, f, iterations, trace, Termination::RelativeTol, gnorm));
            }
            if decrease <= cfg.absolute_cost_tol {
                let gnorm = y.project(&(&qy * 2.0)).norm();
                return Ok(self.finish(y, f, iterations, trace, Termination::AbsoluteTol, gnorm));
            }
        }
    }

    fn finish(
        &self,
        point: ProductPoint,
        cost: f64,
        iterations: usize,
        cost_trace: Vec<f64>,
        termination: Termination,
        gradient_norm: f64,
    ) -> SolveResult {
        SolveResult { point, cost, iterations, cost_trace, termination, gradient_norm }
    }

    /// Riemannian Hessian `Proj(2·(Q·V − BlockDiag(Λ)·V))`.
    pub fn hessian(&self, y: &ProductPoint, lam: &[DMatrix<f64>], v: &TangentVector) -> TangentVector {
        let mut hv = self.q.mul(&v.v);
        for (b, l) in y.layout.blocks.iter().filter(|b| b.kind == BlockKind::Stiefel).zip(lam) {
            let corr = l * v.v.rows(b.offset, b.rows);
            let mut rows = hv.rows_mut(b.offset, b.rows);
            rows -= corr;
        }
        hv *= 2.0;
        y.project(&hv)
    }

    /// Preconditioned CG on `(H + λI)η = −g`, truncated at negative curvature.
    fn truncated_cg(&self, y: &ProductPoint, lam: &[DMatrix<f64>], grad: &TangentVector, lambda: f64) -> TangentVector {
        let layout: Arc<Layout> = y.layout.clone();
        let p = y.p();
        let mut eta = TangentVector::zeros(layout, p);
        let mut r = grad.clone();
        r.v.neg_mut();
        let r0 = r.norm();
        let tol = r0 * (0.1_f64).min(r0.sqrt());
        let pre = self.active_precond(lam, lambda);
        let mut z = self.apply_precond(&pre, y, &r);
        let mut dir = z.clone();
        let mut rz = r.inner(&z);
        for _ in 0..self.cfg.max_cg_iterations {
            let mut hd = self.hessian(y, lam, &dir);
            hd.v += &dir.v * lambda;
            let curv = dir.inner(&hd);
            if !curv.is_finite() {
                break;
            }
            if curv <= 0.0 {
                // Negative curvature of the damped model: follow it to the
                // implicit radius ‖g‖/λ of the damped step.
                let radius = r0 / lambda.max(1e-300);
                let a = dir.inner(&dir);
                let b = 2.0 * eta.inner(&dir);
                let c = eta.inner(&eta) - radius * radius;
                if a > 0.0 && c < 0.0 {
                    let tau = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
                    eta.v += &dir.v * tau;
                }
                break;
            }
            let alpha = rz / curv;
            eta.v += &dir.v * alpha;
            r.v -= &hd.v * alpha;
            if r.norm() <= tol {
                break;
            }
            z = self.apply_precond(&pre, y, &r);
            let rz_new = r.inner(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            dir.v = &z.v + &dir.v * beta;
        }
        eta
    }
}

fn block_jacobi(q: &SparseDataMatrix, delta: f64) -> Vec<DMatrix<f64>> {
    q.layout
        .blocks
        .iter()
        .map(|b| {
            let m = DMatrix::from_fn(b.rows, b.rows, |r, c| q.q.get(b.offset + r, b.offset + c))
                + DMatrix::<f64>::identity(b.rows, b.rows) * delta;
            m.try_inverse().unwrap_or_else(|| DMatrix::identity(b.rows, b.rows))
        })
        .collect()
}

/// Optimizes `⟨Q(w), YYᵀ⟩` from `y0` using the graph's current weights.
pub fn optimize(g: &LiftedGraph, y0: &ProductPoint, cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    LocalSolver::new(g.data_matrix(), cfg.clone())?.solve(y0)
}
