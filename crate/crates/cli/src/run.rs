//! One solve in any of the four modes, reduced to a uniform outcome.

use std::time::Instant;

use clap::ValueEnum;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use certignc::certifier::{LanczosConfig, StaircaseConfig};
use certignc::gnc::{initial_estimate, GncConfig, InnerMode, Threshold};
use certignc::{
    assemble_data_matrix, gnc_solve, lift_graph, point_from_estimate, residual_norms, riemannian_staircase,
    round_solution, stream_rng, Eta, Estimate, Initialization, LocalSolver, Problem, Stream,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// GNC over the certifiable staircase.
    CertiGnc,
    /// GNC over a rank-d local solve.
    GncLocal,
    /// Non-robust weighted least squares at rank d.
    Local,
    /// Staircase without GNC.
    Certifiable,
}

impl Mode {
    pub fn promises_certificate(self) -> bool {
        matches!(self, Mode::CertiGnc | Mode::Certifiable)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::CertiGnc => "certi-gnc",
            Mode::GncLocal => "gnc-local",
            Mode::Local => "local",
            Mode::Certifiable => "certifiable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Odometry,
    Random,
}

impl From<Init> for Initialization {
    fn from(i: Init) -> Self {
        match i {
            Init::Odometry => Initialization::Odometry,
            Init::Random => Initialization::Random,
        }
    }
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Odometry => "odometry",
            Init::Random => "random",
        }
    }
}

/// Fully resolved solve parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub mode: Mode,
    pub init: Init,
    pub threshold: Threshold,
    pub gamma: f64,
    pub eps: f64,
    pub max_outer: usize,
    pub p0: Option<usize>,
    pub p_max: usize,
    pub eta: Eta,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        let g = GncConfig::default();
        let s = StaircaseConfig::default();
        Self {
            mode: Mode::CertiGnc,
            init: Init::Odometry,
            threshold: g.threshold,
            gamma: g.gamma,
            eps: g.eps,
            max_outer: g.max_outer,
            p0: s.p0,
            p_max: s.p_max,
            eta: s.eta,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn gnc_config(&self) -> GncConfig {
        GncConfig {
            threshold: self.threshold,
            gamma: self.gamma,
            eps: self.eps,
            max_outer: self.max_outer,
            inner_mode: if self.mode == Mode::GncLocal { InnerMode::Local } else { InnerMode::Certifiable },
            init: self.init.into(),
            ..GncConfig::default()
        }
    }

    pub fn staircase_config(&self) -> StaircaseConfig {
        StaircaseConfig { p0: self.p0, p_max: self.p_max, eta: self.eta, ..StaircaseConfig::default() }
    }

    /// Rejects option combinations no solver could honor.
    pub fn validate(&self, d: usize) -> Result<(), String> {
        let p0 = self.p0.unwrap_or(d);
        if p0 < d || p0 > self.p_max {
            return Err(format!("rank bounds need d <= p0 <= pmax, got d = {d}, p0 = {p0}, pmax = {}", self.p_max));
        }
        match self.eta {
            Eta::Absolute(e) | Eta::Relative(e) if !(e >= 0.0) => Err(format!("eta must be non-negative, got {e}")),
            _ => self.gnc_config().validate().map_err(|e| e.to_string()),
        }
    }
}

/// One row of the trace: a GNC iteration, or the single solve of the
/// non-robust modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub mu: Option<f64>,
    pub weighted_cost: f64,
    pub robust_cost: f64,
    pub rank: usize,
    pub gap: Option<f64>,
    /// Whether `gap` is relative; absolute when `f_sdp` was near zero.
    pub gap_relative: Option<bool>,
    pub certified: Option<bool>,
    pub ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Uncertified,
    Failed,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub estimate: Option<Estimate>,
    pub trace: Vec<TraceRow>,
    pub termination: String,
    /// Edge indices rejected as outliers (empty for the non-robust modes).
    pub outliers: Vec<usize>,
    pub error: Option<String>,
    pub status: Status,
}

impl Outcome {
    fn failed(trace: Vec<TraceRow>, error: String) -> Self {
        Self { estimate: None, trace, termination: "error".into(), outliers: Vec::new(), error: Some(error), status: Status::Failed }
    }
}

fn robust_cost(problem: &Problem, est: &Estimate, threshold: Threshold) -> Result<f64, String> {
    let r = residual_norms(problem, est).map_err(|e| e.to_string())?;
    let fixed = certignc::factor_graph::fixed_cost(problem, est).map_err(|e| e.to_string())?;
    let d = problem.d;
    let truncated: f64 = problem
        .robust_edges()
        .iter()
        .zip(&r)
        .map(|(&k, ri)| (ri * ri).min(threshold.cbar_for_dof(problem.edges[k].residual_dof(d)).powi(2)))
        .sum();
    Ok(fixed + truncated)
}

fn gnc_rows(trace: &[certignc::GncRecord], timing: bool) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|r| TraceRow {
            iter: r.iter,
            mu: Some(r.mu),
            weighted_cost: r.weighted_cost,
            robust_cost: r.robust_cost,
            rank: r.rank,
            gap: r.gap.map(|g| g.value),
            gap_relative: r.gap.map(|g| g.relative),
            certified: r.certified,
            ms: timing.then_some(r.ms),
        })
        .collect()
}

fn status_of(certified: impl IntoIterator<Item = Option<bool>>) -> Status {
    if certified.into_iter().any(|c| c == Some(false)) {
        Status::Uncertified
    } else {
        Status::Ok
    }
}

/// Runs `opts.mode` on `problem`. Never panics on solver failure: errors are
/// folded into the outcome together with any partial trace.
pub fn solve_problem(problem: &Problem, opts: &SolveOptions, timing: bool) -> Outcome {
    if let Err(e) = opts.validate(problem.d) {
        return Outcome::failed(Vec::new(), e);
    }
    match opts.mode {
        Mode::CertiGnc | Mode::GncLocal => match gnc_solve(problem, &opts.gnc_config(), &opts.staircase_config(), opts.seed) {
            Ok(r) => {
                let trace = gnc_rows(&r.trace, timing);
                let status = status_of(trace.iter().map(|t| t.certified));
                let termination = serde_json::to_value(r.termination)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default();
                Outcome { outliers: r.outlier_edges(), estimate: Some(r.estimate), trace, termination, error: None, status }
            }
            Err(f) => Outcome::failed(gnc_rows(&f.trace, timing), f.error.to_string()),
        },
        Mode::Local | Mode::Certifiable => single_solve(problem, opts, timing).unwrap_or_else(|e| Outcome::failed(Vec::new(), e)),
    }
}

fn single_solve(problem: &Problem, opts: &SolveOptions, timing: bool) -> Result<Outcome, String> {
    let t0 = Instant::now();
    let d = problem.d;
    let start = initial_estimate(problem, opts.init.into(), opts.seed);
    let graph = lift_graph(problem, d).map_err(|e| e.to_string())?;
    let ones = vec![1.0; graph.slot_count()];
    let q = assemble_data_matrix(&graph, &ones).map_err(|e| e.to_string())?;
    let (estimate, row, termination) = if opts.mode == Mode::Local {
        let solver = LocalSolver::new(q, opts.staircase_config().solver).map_err(|e| e.to_string())?;
        let y0 = point_from_estimate(graph.layout.clone(), &start, d).map_err(|e| e.to_string())?;
        let res = solver.solve(&y0).map_err(|e| e.to_string())?;
        let estimate = round_solution(&res.point);
        let termination = serde_json::to_value(res.termination)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let row = (res.cost, d, None, None);
        (estimate, row, termination)
    } else {
        let eig_seed: u64 = stream_rng(opts.seed, Stream::Eigensolver).random();
        let base = opts.staircase_config();
        let stair = StaircaseConfig { eig: LanczosConfig { seed: eig_seed, ..base.eig.clone() }, ..base };
        let p0 = stair.p0.unwrap_or(d);
        let y0 = point_from_estimate(graph.layout.clone(), &start, p0).map_err(|e| e.to_string())?;
        let res = riemannian_staircase(&graph, &y0, &stair).map_err(|e| e.to_string())?;
        let gap = res.f_sdp.map(|f| certignc::gnc::suboptimality_gap(res.f_qcqp, f));
        let termination = if res.certified { "certified" } else { "rank_limit" }.to_string();
        (res.estimate, (res.certificate.f_attained, res.p_term, gap, Some(res.certified)), termination)
    };
    let (weighted_cost, rank, gap, certified) = row;
    let trace = vec![TraceRow {
        iter: 0,
        mu: None,
        weighted_cost,
        robust_cost: robust_cost(problem, &estimate, opts.threshold)?,
        rank,
        gap: gap.map(|g| g.value),
        gap_relative: gap.map(|g| g.relative),
        certified,
        ms: timing.then(|| t0.elapsed().as_secs_f64() * 1e3),
    }];
    Ok(Outcome {
        estimate: Some(estimate),
        status: status_of(trace.iter().map(|t| t.certified)),
        trace,
        termination,
        outliers: Vec::new(),
        error: None,
    })
}
