//! Machine-readable run artifacts: the JSON report and the CSV trace.

use std::io::Write;

use serde::{Deserialize, Serialize};

use certignc::gnc::Threshold;
use certignc::{Eta, Problem};

use crate::run::{Outcome, SolveOptions, Status, TraceRow};

pub const RUN_SCHEMA_VERSION: &str = "run_report.v1";
pub const RUN_SCHEMA: &str = include_str!("../../../schemas/run_report.v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub input: String,
    pub mode: String,
    pub init: String,
    pub seed: u64,
    pub threshold: Scalar,
    pub gamma: f64,
    pub eps: f64,
    pub mu_min: f64,
    pub c_tol_outer: f64,
    pub c_tol_inner: f64,
    pub max_outer: usize,
    pub p0: usize,
    pub p_max: usize,
    pub eta: Scalar,
    pub allow_uncertified: bool,
    pub timing: bool,
    pub ground_truth: Option<String>,
    pub injection_report: Option<String>,
}

impl ConfigEcho {
    pub fn new(input: &str, opts: &SolveOptions, d: usize) -> Self {
        let g = opts.gnc_config();
        let threshold = match opts.threshold {
            Threshold::Fixed(c) => Scalar { kind: "fixed".into(), value: c },
            Threshold::ChiSquareQuantile(q) => Scalar { kind: "chi_square_quantile".into(), value: q },
        };
        let eta = match opts.eta {
            Eta::Absolute(e) => Scalar { kind: "absolute".into(), value: e },
            Eta::Relative(e) => Scalar { kind: "relative".into(), value: e },
        };
        Self {
            input: input.to_string(),
            mode: opts.mode.name().into(),
            init: opts.init.name().into(),
            seed: opts.seed,
            threshold,
            gamma: g.gamma,
            eps: g.eps,
            mu_min: g.mu_min,
            c_tol_outer: g.c_tol_outer,
            c_tol_inner: g.c_tol_inner,
            max_outer: g.max_outer,
            p0: opts.p0.unwrap_or(d),
            p_max: opts.p_max,
            eta,
            allow_uncertified: false,
            timing: false,
            ground_truth: None,
            injection_report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub d: usize,
    pub poses: usize,
    pub landmarks: usize,
    pub edges: usize,
    pub robust_edges: usize,
    pub isotropized_edges: usize,
}

impl ProblemSummary {
    pub fn new(p: &Problem) -> Self {
        Self {
            d: p.d,
            poses: p.poses.len(),
            landmarks: p.landmarks.len(),
            edges: p.edges.len(),
            robust_edges: p.robust_edges().len(),
            isotropized_edges: p.meta.isotropized_edges,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub translation_rmse: Option<f64>,
    pub rotation_rmse_deg: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub status: Status,
    pub termination: String,
    pub error: Option<String>,
    pub outlier_edges: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub config: ConfigEcho,
    pub problem: ProblemSummary,
    pub trace: Vec<TraceRow>,
    pub result: RunResult,
    pub metrics: Metrics,
    /// Null unless timing was requested, so reports are reproducible byte for byte.
    pub wall_ms: Option<f64>,
}

impl RunReport {
    pub fn new(config: ConfigEcho, problem: &Problem, outcome: &Outcome, metrics: Metrics, wall_ms: Option<f64>) -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION.into(),
            config,
            problem: ProblemSummary::new(problem),
            trace: outcome.trace.clone(),
            result: RunResult {
                status: outcome.status,
                termination: outcome.termination.clone(),
                error: outcome.error.clone(),
                outlier_edges: outcome.outliers.clone(),
                iterations: outcome.trace.len(),
            },
            metrics,
            wall_ms,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}

/// CSV row with the public trace header.
#[derive(Serialize)]
struct CsvRow {
    iter: usize,
    mu: Option<f64>,
    weighted_cost: f64,
    robust_cost: f64,
    rank: usize,
    gap: Option<f64>,
    certified: Option<bool>,
    ms: Option<f64>,
}

pub const TRACE_HEADER: &str = "iter,mu,weighted_cost,robust_cost,rank,gap,certified,ms";

/// Writes the trace; null fields are empty cells.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_HEADER.split(','))?;
    for r in rows {
        w.serialize(CsvRow {
            iter: r.iter,
            mu: r.mu,
            weighted_cost: r.weighted_cost,
            robust_cost: r.robust_cost,
            rank: r.rank,
            gap: r.gap,
            certified: r.certified,
            ms: r.ms,
        })?;
    }
    w.flush()?;
    Ok(())
}
