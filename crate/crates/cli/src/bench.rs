//! Monte Carlo sweep over trials × contamination rates × solver modes.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use certignc::{inject_outliers, precision_recall, rmse_ate, trial_seed, Estimate, Problem};

use crate::run::{solve_problem, Init, Mode, SolveOptions, Status};

pub const BENCH_SCHEMA_VERSION: &str = "bench_report.v1";
pub const BENCH_SCHEMA: &str = include_str!("../../../schemas/bench_report.v1.json");

/// A solver mode paired with its initialization, written `mode[/init]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchMode {
    pub mode: Mode,
    pub init: Init,
}

impl BenchMode {
    pub fn label(&self) -> String {
        format!("{}/{}", self.mode.name(), self.init.name())
    }

    pub fn defaults() -> Vec<BenchMode> {
        vec![
            BenchMode { mode: Mode::CertiGnc, init: Init::Odometry },
            BenchMode { mode: Mode::GncLocal, init: Init::Odometry },
            BenchMode { mode: Mode::GncLocal, init: Init::Random },
        ]
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        use clap::ValueEnum;
        let (m, i) = s.split_once('/').unwrap_or((s, "odometry"));
        Ok(BenchMode { mode: Mode::from_str(m, false)?, init: Init::from_str(i, false)? })
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub trials: usize,
    pub rates: Vec<f64>,
    pub modes: Vec<BenchMode>,
    pub seed: u64,
    /// Worker threads; `None` uses one per core.
    pub jobs: Option<usize>,
    pub timing: bool,
    /// Solver parameters shared by every cell; mode, init and seed are overridden.
    pub options: SolveOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub rate: f64,
    pub mode: String,
    pub trial: usize,
    pub seed: u64,
    pub status: Status,
    pub error: Option<String>,
    pub translation_rmse: Option<f64>,
    pub rotation_rmse_deg: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iterations: usize,
    pub max_rank: usize,
    pub max_gap: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Stats { mean: v.iter().sum::<f64>() / n as f64, median, min: v[0], max: v[n - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rate: f64,
    pub mode: String,
    pub trials: usize,
    pub failed: usize,
    pub uncertified: usize,
    pub translation_rmse: Option<Stats>,
    pub rotation_rmse_deg: Option<Stats>,
    pub precision: Option<Stats>,
    pub recall: Option<Stats>,
    pub wall_ms: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub source: String,
    pub trials: usize,
    pub rates: Vec<f64>,
    pub modes: Vec<String>,
    pub seed: u64,
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: String,
    pub config: BenchConfig,
    pub cells: Vec<Cell>,
    pub trials: Vec<TrialRecord>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }
}

fn run_trial(base: &Problem, truth: Option<&Estimate>, spec: &BenchSpec, rate: f64, mode: BenchMode, trial: usize) -> TrialRecord {
    let seed = trial_seed(spec.seed, trial as u64);
    let mut rec = TrialRecord {
        rate,
        mode: mode.label(),
        trial,
        seed,
        status: Status::Failed,
        error: None,
        translation_rmse: None,
        rotation_rmse_deg: None,
        precision: None,
        recall: None,
        iterations: 0,
        max_rank: 0,
        max_gap: None,
        wall_ms: None,
    };
    let t0 = Instant::now();
    let (problem, injected) = match inject_outliers(base, rate, seed) {
        Ok(x) => x,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    let opts = SolveOptions { mode: mode.mode, init: mode.init, seed, ..spec.options.clone() };
    let out = solve_problem(&problem, &opts, false);
    rec.status = out.status;
    rec.error = out.error.clone();
    rec.iterations = out.trace.len();
    rec.max_rank = out.trace.iter().map(|t| t.rank).max().unwrap_or(0);
    rec.max_gap = out.trace.iter().filter_map(|t| t.gap).reduce(f64::max);
    if let Some(est) = &out.estimate {
        if matches!(mode.mode, Mode::CertiGnc | Mode::GncLocal) {
            let (p, r) = precision_recall(&out.outliers, &injected.replaced);
            rec.precision = Some(p);
            rec.recall = Some(r);
        }
        if let Some(ate) = truth.and_then(|t| rmse_ate(est, t).ok()) {
            rec.translation_rmse = Some(ate.translation_rmse);
            rec.rotation_rmse_deg = Some(ate.rotation_rmse_deg);
        }
    }
    rec.wall_ms = spec.timing.then(|| t0.elapsed().as_secs_f64() * 1e3);
    rec
}

/// Runs every (rate, mode, trial) cell on a bounded worker pool. A panicking
/// or failing trial is recorded as failed and never aborts the sweep; results
/// are ordered by (rate, mode, trial) regardless of scheduling.
pub fn run_bench(base: &Problem, truth: Option<&Estimate>, source: &str, spec: &BenchSpec) -> BenchReport {
    let mut keys = Vec::new();
    for &rate in &spec.rates {
        for &mode in &spec.modes {
            for trial in 0..spec.trials {
                keys.push((rate, mode, trial));
            }
        }
    }
    let work = || -> Vec<TrialRecord> {
        keys.par_iter()
            .map(|&(rate, mode, trial)| {
                catch_unwind(AssertUnwindSafe(|| run_trial(base, truth, spec, rate, mode, trial))).unwrap_or_else(|_| {
                    TrialRecord {
                        rate,
                        mode: mode.label(),
                        trial,
                        seed: trial_seed(spec.seed, trial as u64),
                        status: Status::Failed,
                        error: Some("trial panicked".into()),
                        translation_rmse: None,
                        rotation_rmse_deg: None,
                        precision: None,
                        recall: None,
                        iterations: 0,
                        max_rank: 0,
                        max_gap: None,
                        wall_ms: None,
                    }
                })
            })
            .collect()
    };
    let trials = match spec.jobs.map(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build()) {
        Some(Ok(pool)) => pool.install(work),
        _ => work(),
    };
    let cells = spec
        .rates
        .iter()
        .flat_map(|&rate| spec.modes.iter().map(move |m| (rate, m.label())))
        .map(|(rate, mode)| {
            let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.rate == rate && t.mode == mode).collect();
            let col = |f: fn(&TrialRecord) -> Option<f64>| Stats::of(&rows.iter().filter_map(|t| f(t)).collect::<Vec<_>>());
            Cell {
                rate,
                trials: rows.len(),
                failed: rows.iter().filter(|t| t.status == Status::Failed).count(),
                uncertified: rows.iter().filter(|t| t.status == Status::Uncertified).count(),
                translation_rmse: col(|t| t.translation_rmse),
                rotation_rmse_deg: col(|t| t.rotation_rmse_deg),
                precision: col(|t| t.precision),
                recall: col(|t| t.recall),
                wall_ms: col(|t| t.wall_ms),
                mode,
            }
        })
        .collect();
    BenchReport {
        schema_version: BENCH_SCHEMA_VERSION.into(),
        config: BenchConfig {
            source: source.to_string(),
            trials: spec.trials,
            rates: spec.rates.clone(),
            modes: spec.modes.iter().map(BenchMode::label).collect(),
            seed: spec.seed,
            timing: spec.timing,
        },
        cells,
        trials,
    }
}

/// Long format: one row per trial.
pub fn write_long_csv<W: Write>(trials: &[TrialRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in trials {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}
