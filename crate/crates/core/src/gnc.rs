//! Graduated non-convexity with the truncated-least-squares surrogate family,
//! over either the certifiable staircase or a single rank-`d` local solve.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::certifier::{staircase_with, CertifierError, LanczosConfig, StaircaseConfig};
use crate::factor_graph::{
    assemble_data_matrix, fixed_cost, lift_graph, reweight_data_matrix, GraphError, LiftedGraph, SparseDataMatrix,
};
use crate::manifolds::{point_from_estimate, random_point, round_solution, ManifoldError, ProductPoint};
use crate::problem::{Estimate, Problem};
use crate::rng::{stream_rng, Stream};
use crate::solver::{LocalSolver, SolverError};

/// `μ₀` when every residual is already inside the trust band.
pub const MU_SATURATED: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GncError {
    #[error("weight {0} outside [0, 1]")]
    WeightDomain(f64),
    #[error("mu must be positive, got {0}")]
    MuDomain(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Certifier(#[from] CertifierError),
}

/// Inlier threshold `c̄` on the whitened residual `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Fixed(f64),
    /// `c̄² = χ²` quantile at the edge's residual degrees of freedom.
    ChiSquareQuantile(f64),
}

impl Threshold {
    pub fn cbar_for_dof(self, dof: usize) -> f64 {
        match self {
            Threshold::Fixed(c) => c,
            Threshold::ChiSquareQuantile(q) => {
                let chi = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
                chi.inverse_cdf(q).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    Certifiable,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    Odometry,
    Random,
}

/// Starting point of each stage's inner solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Previous stage's rounded estimate at rank `p0`.
    RoundedEstimate,
    /// Previous stage's lifted point at its termination rank.
    PreviousRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GncConfig {
    pub threshold: Threshold,
    pub gamma: f64,
    pub mu_min: f64,
    pub eps: f64,
    pub c_tol_outer: f64,
    pub c_tol_inner: f64,
    pub max_outer: usize,
    pub inner_mode: InnerMode,
    pub fixed_mu: bool,
    pub single_inner_iteration: bool,
    pub warm_start: WarmStart,
    pub init: Initialization,
}

impl Default for GncConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::ChiSquareQuantile(0.99),
            gamma: 1.4,
            mu_min: 1e-4,
            eps: 1e-2,
            c_tol_outer: 1e-6,
            c_tol_inner: 1e-5,
            max_outer: 100,
            inner_mode: InnerMode::Certifiable,
            fixed_mu: false,
            single_inner_iteration: true,
            warm_start: WarmStart::RoundedEstimate,
            init: Initialization::Odometry,
        }
    }
}

impl GncConfig {
    pub fn validate(&self) -> Result<(), GncError> {
        if !(self.gamma > 1.0) {
            return Err(GncError::Config(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(GncError::Config(format!("eps must lie in (0, 1/2), got {}", self.eps)));
        }
        if !(self.mu_min > 0.0 && self.c_tol_outer > 0.0 && self.c_tol_inner > 0.0) {
            return Err(GncError::Config("tolerances and mu_min must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(GncError::Config("max_outer must be at least 1".into()));
        }
        match self.threshold {
            Threshold::Fixed(c) if !(c > 0.0) => Err(GncError::Config(format!("cbar must be positive, got {c}"))),
            Threshold::ChiSquareQuantile(q) if !(q > 0.0 && q < 1.0) => {
                Err(GncError::Config(format!("quantile must lie in (0, 1), got {q}")))
            }
            _ => Ok(()),
        }
    }
}

/// TLS outlier process `Φ(w) = μ(1 − w)/(μ + w)·c̄²`.
pub fn tls_outlier_process(w: f64, mu: f64, cbar: f64) -> Result<f64, GncError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(GncError::WeightDomain(w));
    }
    if !(mu > 0.0) {
        return Err(GncError::MuDomain(mu));
    }
    Ok(mu * (1.0 - w) / (mu + w) * cbar * cbar)
}

/// Closed-form minimizer of `w·r² + Φ(w)` over `[0, 1]`.
pub fn tls_weight_update(r2: f64, mu: f64, cbar: f64) -> f64 {
    let c2 = cbar * cbar;
    if r2 <= mu / (mu + 1.0) * c2 {
        1.0
    } else if r2 >= (mu + 1.0) / mu * c2 {
        0.0
    } else {
        (cbar / r2.sqrt() * (mu * (mu + 1.0)).sqrt() - mu).clamp(0.0, 1.0)
    }
}

/// `Σ [w_i r_i² + Φ(w_i)] + fixed` over robust residuals `r`.
pub fn br_objective(fixed: f64, r: &[f64], w: &[f64], mu: f64, cbar: &[f64]) -> Result<f64, GncError> {
    let mut total = fixed;
    for ((ri, wi), ci) in r.iter().zip(w).zip(cbar) {
        total += wi * ri * ri + tls_outlier_process(*wi, mu, *ci)?;
    }
    Ok(total)
}

/// Black–Rangarajan objective at a rank-`d` estimate.
pub fn evaluate_br_objective(
    problem: &Problem,
    est: &Estimate,
    w: &[f64],
    mu: f64,
    cbar: &[f64],
) -> Result<f64, GncError> {
    let r = crate::factor_graph::residual_norms(problem, est)?;
    br_objective(fixed_cost(problem, est)?, &r, w, mu, cbar)
}

/// `μ₀ = max(μ_min, c̄²/(2r_max² − c̄²))`, or [`MU_SATURATED`] when `2r_max² ≤ c̄²`.
pub fn init_mu(residuals: &[f64], cbar: f64, mu_min: f64) -> f64 {
    let rmax = residuals.iter().cloned().fold(0.0_f64, f64::max);
    let c2 = cbar * cbar;
    if 2.0 * rmax * rmax > c2 {
        mu_min.max(c2 / (2.0 * rmax * rmax - c2))
    } else {
        MU_SATURATED
    }
}

/// Per-edge thresholds: the most demanding edge sets `μ₀`.
pub fn init_mu_per_edge(residuals: &[f64], cbar: &[f64], mu_min: f64) -> f64 {
    residuals
        .iter()
        .zip(cbar)
        .map(|(&r, &c)| init_mu(&[r], c, mu_min))
        .fold(MU_SATURATED, f64::min)
}

pub fn update_mu(mu: f64, gamma: f64) -> f64 {
    gamma * mu
}

/// Relative suboptimality gap, with a division guard for near-zero bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub value: f64,
    /// False when `f_sdp` was too small and `value` is the absolute gap.
    pub relative: bool,
}

pub fn suboptimality_gap(f_qcqp: f64, f_sdp: f64) -> Gap {
    if f_sdp > 1e-12 * (1.0 + f_qcqp.abs()) {
        Gap { value: (f_qcqp - f_sdp) / f_sdp, relative: true }
    } else {
        Gap { value: f_qcqp - f_sdp, relative: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GncRecord {
    pub iter: usize,
    pub mu: f64,
    /// `⟨Q(w), YYᵀ⟩` of the inner solve.
    pub weighted_cost: f64,
    /// `Σ min(r², c̄²)` plus odometry cost at the rounded estimate.
    pub robust_cost: f64,
    /// Black–Rangarajan objective after this iteration's weight update.
    pub br_objective: f64,
    /// Weights used by this iteration's inner solve.
    pub weights: Vec<f64>,
    pub rank: usize,
    pub gap: Option<Gap>,
    pub certified: Option<bool>,
    pub f_sdp: Option<f64>,
    pub f_qcqp: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GncTermination {
    WeightsConverged,
    CostConverged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct GncResult {
    pub estimate: Estimate,
    pub weights: Vec<f64>,
    /// Indices into `problem.edges` of the robust edges, in weight-slot order.
    pub robust_edges: Vec<usize>,
    /// Robust edges classified as inliers (`w ≥ ½`), by slot.
    pub inliers: Vec<bool>,
    pub trace: Vec<GncRecord>,
    pub termination: GncTermination,
    pub cbar: Vec<f64>,
}

impl GncResult {
    /// Edge indices classified as outliers.
    pub fn outlier_edges(&self) -> Vec<usize> {
        self.robust_edges.iter().zip(&self.inliers).filter(|(_, &ok)| !ok).map(|(&e, _)| e).collect()
    }

    pub fn all_certified(&self) -> bool {
        self.trace.iter().all(|r| r.certified != Some(false))
    }
}

/// A failed run with the trace accumulated so far.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct GncFailure {
    pub error: GncError,
    pub trace: Vec<GncRecord>,
}

struct InnerOutcome {
    estimate: Estimate,
    lifted: ProductPoint,
    weighted_cost: f64,
    rank: usize,
    f_sdp: Option<f64>,
    f_qcqp: f64,
    certified: Option<bool>,
}

/// Random rank-`d` start with rotations in `SO(d)`.
pub fn random_estimate(problem: &Problem, seed: u64) -> Estimate {
    let layout = Arc::new(crate::manifolds::Layout::from_problem(problem));
    let mut rng = stream_rng(seed, Stream::Initialization);
    round_solution(&random_point(layout, problem.d, &mut rng))
}

pub fn initial_estimate(problem: &Problem, init: Initialization, seed: u64) -> Estimate {
    match init {
        Initialization::Odometry => problem.odometry_estimate(),
        Initialization::Random => random_estimate(problem, seed),
    }
}

fn inner_solve(
    graph: &LiftedGraph,
    q: SparseDataMatrix,
    start: &Estimate,
    prev_lifted: Option<&ProductPoint>,
    cfg: &GncConfig,
    stair: &StaircaseConfig,
) -> Result<InnerOutcome, GncError> {
    let d = graph.d();
    let solver = LocalSolver::new(q, stair.solver.clone())?;
    match cfg.inner_mode {
        InnerMode::Local => {
            let y0 = match (cfg.warm_start, prev_lifted) {
                (WarmStart::PreviousRank, Some(prev)) => prev.clone(),
                _ => point_from_estimate(graph.layout.clone(), start, d)?,
            };
            let res = solver.solve(&y0)?;
            let estimate = round_solution(&res.point);
            let xd = point_from_estimate(graph.layout.clone(), &estimate, d)?;
            let f_qcqp = solver.data_matrix().cost(&xd.y);
            Ok(InnerOutcome {
                estimate,
                lifted: res.point,
                weighted_cost: res.cost,
                rank: d,
                f_sdp: None,
                f_qcqp,
                certified: None,
            })
        }
        InnerMode::Certifiable => {
            let p0 = stair.p0.unwrap_or(d).max(d);
            let y0 = match (cfg.warm_start, prev_lifted) {
                (WarmStart::PreviousRank, Some(prev)) => prev.clone(),
                _ => point_from_estimate(graph.layout.clone(), start, p0)?,
            };
            let res = staircase_with(&solver, &y0, stair)?;
            Ok(InnerOutcome {
                estimate: res.estimate,
                weighted_cost: res.certificate.f_attained,
                rank: res.p_term,
                f_sdp: res.f_sdp,
                f_qcqp: res.f_qcqp,
                certified: Some(res.certified),
                lifted: res.point,
            })
        }
    }
}

/// Graduated non-convexity over the chosen inner solver. `stair.solver` also
/// configures the rank-`d` local solve of [`InnerMode::Local`].
pub fn gnc_solve(
    problem: &Problem,
    cfg: &GncConfig,
    stair: &StaircaseConfig,
    seed: u64,
) -> Result<GncResult, GncFailure> {
    let mut trace = Vec::new();
    match gnc_inner(problem, cfg, stair, seed, &mut trace) {
        Ok(r) => Ok(r),
        Err(error) => Err(GncFailure { error, trace }),
    }
}

fn gnc_inner(
    problem: &Problem,
    cfg: &GncConfig,
    stair: &StaircaseConfig,
    seed: u64,
    trace: &mut Vec<GncRecord>,
) -> Result<GncResult, GncError> {
    cfg.validate()?;
    let d = problem.d;
    let graph = lift_graph(problem, d)?;
    let robust_edges = problem.robust_edges();
    let cbar: Vec<f64> =
        robust_edges.iter().map(|&k| cfg.threshold.cbar_for_dof(problem.edges[k].residual_dof(d))).collect();
    let eig_seed: u64 = stream_rng(seed, Stream::Eigensolver).random();
    let stair = StaircaseConfig { eig: LanczosConfig { seed: eig_seed, ..stair.eig.clone() }, ..stair.clone() };

    let mut estimate = initial_estimate(problem, cfg.init, seed);
    let mut weights = vec![1.0; robust_edges.len()];
    let mut q = assemble_data_matrix(&graph, &weights)?;
    let mut mu: Option<f64> = None;
    let mut prev_lifted: Option<ProductPoint> = None;
    let mut prev_cost: Option<f64> = None;
    let mut termination = GncTermination::MaxIterations;
    let mut saturated_streak = 0;

    for iter in 0..cfg.max_outer {
        let t0 = Instant::now();
        let mut inner_reps = 0;
        let (outcome, new_weights, r) = loop {
            let outcome = inner_solve(&graph, q.clone(), &estimate, prev_lifted.as_ref(), cfg, &stair)?;
            let r = crate::factor_graph::residual_norms(problem, &outcome.estimate)?;
            let stage_mu = *mu.get_or_insert_with(|| init_mu_per_edge(&r, &cbar, cfg.mu_min));
            let new_weights: Vec<f64> =
                r.iter().zip(&cbar).map(|(&ri, &ci)| tls_weight_update(ri * ri, stage_mu, ci)).collect();
            inner_reps += 1;
            let settled = cfg.single_inner_iteration
                || inner_reps >= cfg.max_outer
                || prev_cost.is_some_and(|c| (c - outcome.weighted_cost).abs() <= cfg.c_tol_inner);
            if settled {
                break (outcome, new_weights, r);
            }
            // Repeat the weighted solve at this μ until the weighted cost settles.
            q = reweight_data_matrix(&graph, &q, &weights, &new_weights)?;
            weights = new_weights;
            prev_cost = Some(outcome.weighted_cost);
            estimate = outcome.estimate.clone();
            prev_lifted = Some(outcome.lifted.clone());
        };
        let stage_mu = mu.expect("set on first solve");
        let fixed = fixed_cost(problem, &outcome.estimate)?;
        let robust_cost = fixed + r.iter().zip(&cbar).map(|(ri, ci)| (ri * ri).min(ci * ci)).sum::<f64>();
        let br = br_objective(fixed, &r, &new_weights, stage_mu, &cbar)?;
        let gap = outcome.f_sdp.map(|f| suboptimality_gap(outcome.f_qcqp, f));
        trace.push(GncRecord {
            iter,
            mu: stage_mu,
            weighted_cost: outcome.weighted_cost,
            robust_cost,
            br_objective: br,
            weights: weights.clone(),
            rank: outcome.rank,
            gap,
            certified: outcome.certified,
            f_sdp: outcome.f_sdp,
            f_qcqp: outcome.f_qcqp,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        q = reweight_data_matrix(&graph, &q, &weights, &new_weights)?;
        let used_weights = std::mem::replace(&mut weights, new_weights);
        estimate = outcome.estimate;
        prev_lifted = Some(outcome.lifted);

        // Binary weights only count as converged when the solve that produced
        // them used the same classification and they agree with the hard
        // truncation of the current residuals; at small μ every weight can sit
        // near zero without any residual being an outlier.
        let weights_converged = weights.iter().zip(&used_weights).zip(r.iter().zip(&cbar)).all(|((w, u), (ri, ci))| {
            (w - w.round()).abs() <= cfg.eps && w.round() == u.round() && (w.round() == 1.0) == (ri * ri <= ci * ci)
        });
        let cost_converged = prev_cost.is_some_and(|c| (c - outcome.weighted_cost).abs() <= cfg.c_tol_outer);
        prev_cost = Some(outcome.weighted_cost);
        if weights_converged {
            termination = GncTermination::WeightsConverged;
            break;
        }
        if cost_converged {
            termination = GncTermination::CostConverged;
            break;
        }
        // μ stops growing once the update has produced exactly binary weights twice.
        saturated_streak = if weights.iter().all(|&w| w == 0.0 || w == 1.0) { saturated_streak + 1 } else { 0 };
        if !cfg.fixed_mu && saturated_streak < 2 {
            mu = Some(update_mu(stage_mu, cfg.gamma));
        }
    }

    // The reported estimate is the solution of the last weighted problem; when
    // the final weight update changed weights materially, re-solve once so the
    // estimate matches the reported inlier set.
    let binary: Vec<f64> = weights.iter().map(|w| if *w >= 0.5 { 1.0 } else { 0.0 }).collect();
    let inliers: Vec<bool> = binary.iter().map(|&w| w == 1.0).collect();
    let last_used = trace.last().map(|r| r.weights.clone()).unwrap_or_default();
    let last_binary: Vec<f64> = last_used.iter().map(|w| if *w >= 0.5 { 1.0 } else { 0.0 }).collect();
    let needs_polish = last_binary != binary || last_used.iter().any(|w| (w - w.round()).abs() > cfg.eps);
    if needs_polish {
        let qb = assemble_data_matrix(&graph, &binary)?;
        let outcome = inner_solve(&graph, qb, &estimate, prev_lifted.as_ref(), cfg, &stair)?;
        estimate = outcome.estimate;
    }

    Ok(GncResult { estimate, weights, robust_edges, inliers, trace: std::mem::take(trace), termination, cbar })
}
