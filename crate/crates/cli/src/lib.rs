//! Command-line front end: solve, generate, inject, evaluate and bench.
//!
//! Exit codes: 0 on success, 2 on usage, I/O or parse failures, 3 when the
//! solver fails or a certifying mode ends with an uncertified stage.

pub mod bench;
pub mod report;
pub mod run;
pub mod schema;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use certignc::gnc::Threshold;
use certignc::io::{
    edge_line, parse_document, parse_ground_truth, serialize_with_estimate, write_ground_truth, InjectionReport,
};
use certignc::{generate_synthetic, inject_outliers, precision_recall, rmse_ate, Eta, Estimate, Problem, SyntheticSpec, World};

use bench::{run_bench, write_long_csv, BenchMode, BenchSpec};
use report::{write_trace_csv, ConfigEcho, Metrics, RunReport};
use run::{solve_problem, Init, Mode, SolveOptions, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "certignc", version, about = "Certifiably robust pose-graph and landmark SLAM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a g2o problem and write the report, trace and solved graph.
    Solve(SolveArgs),
    /// Write a synthetic g2o problem and its ground-truth sidecar.
    Generate(GenerateArgs),
    /// Replace a fraction of the non-odometry edges with random measurements.
    Inject(InjectArgs),
    /// Compare a solved g2o against ground truth and print the trajectory error as JSON.
    Evaluate(EvaluateArgs),
    /// Monte Carlo sweep over trials, outlier rates and modes.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverFlags {
    /// Fixed inlier threshold on the whitened residual.
    #[arg(long, conflicts_with = "cbar_quantile")]
    pub cbar: Option<f64>,
    /// Chi-square quantile for a per-edge threshold at its residual degrees of freedom.
    #[arg(long, default_value_t = 0.99)]
    pub cbar_quantile: f64,
    #[arg(long, default_value_t = 1.4)]
    pub gamma: f64,
    /// Initial staircase rank (defaults to d).
    #[arg(long)]
    pub p0: Option<usize>,
    #[arg(long, default_value_t = 30)]
    pub pmax: usize,
    /// Absolute certificate slack; by default 1e-5 times the mean |diag Q|.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Distance from {0, 1} at which a weight counts as converged.
    #[arg(long, default_value_t = 1e-2)]
    pub eps: f64,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
}

impl SolverFlags {
    pub fn options(&self, mode: Mode, init: Init, seed: u64) -> SolveOptions {
        let base = SolveOptions::default();
        SolveOptions {
            mode,
            init,
            threshold: match self.cbar {
                Some(c) => Threshold::Fixed(c),
                None => Threshold::ChiSquareQuantile(self.cbar_quantile),
            },
            gamma: self.gamma,
            eps: self.eps,
            max_outer: self.max_outer,
            p0: self.p0,
            p_max: self.pmax,
            eta: self.eta.map(Eta::Absolute).unwrap_or(base.eta),
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::CertiGnc)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Init::Odometry)]
    pub init: Init,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverFlags,
    /// Ground-truth sidecar for trajectory error.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Injection report for outlier precision and recall.
    #[arg(long)]
    pub injection_report: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Solved g2o (input graph with estimated vertices).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Exit 0 even when a certifying mode ends with an uncertified stage.
    #[arg(long)]
    pub allow_uncertified: bool,
    /// Record wall-clock times (artifacts are then no longer byte-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WorldArg {
    Ring,
    Grid,
}

#[derive(Debug, Clone, Args)]
pub struct WorldFlags {
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 20)]
    pub poses: usize,
    #[arg(long, value_enum, default_value_t = WorldArg::Ring)]
    pub world: WorldArg,
    #[arg(long, default_value_t = 0.01)]
    pub sigma_r: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_t: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lc_prob: f64,
    #[arg(long, default_value_t = 3.0)]
    pub lc_radius: f64,
    #[arg(long, default_value_t = 0)]
    pub landmarks: usize,
    #[arg(long, default_value_t = 3.0)]
    pub obs_radius: f64,
    #[arg(long, default_value_t = 2)]
    pub min_observations: usize,
}

impl WorldFlags {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            d: self.dim,
            poses: self.poses,
            world: match self.world {
                WorldArg::Ring => World::Ring,
                WorldArg::Grid => World::Grid,
            },
            sigma_r: self.sigma_r,
            sigma_t: self.sigma_t,
            lc_prob: self.lc_prob,
            lc_radius: self.lc_radius,
            landmarks: self.landmarks,
            obs_radius: self.obs_radius,
            min_observations: self.min_observations,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Sidecar path; defaults to `<output>.gt`.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub world: WorldFlags,
}

#[derive(Debug, Clone, Args)]
pub struct InjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Injection report path; defaults to `<output>.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Solved g2o whose vertices are the estimate.
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Base problem; a synthetic world is generated from the world flags when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ground truth for `--input`.
    #[arg(long, requires = "input")]
    pub ground_truth: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3])]
    pub rates: Vec<f64>,
    /// Comma-separated `mode[/init]` labels.
    #[arg(long, value_delimiter = ',', default_values = ["certi-gnc/odometry", "gnc-local/odometry", "gnc-local/random"])]
    pub modes: Vec<BenchMode>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: one per core).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Long-format CSV, one row per trial.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldFlags,
    #[command(flatten)]
    pub solver: SolverFlags,
}

/// A failure with its exit code and a one-line reason.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn input(kind: &'static str, message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, kind, message: message.into() }
    }

    /// `error: <kind>: <message>` on a single line.
    pub fn line(&self) -> String {
        format!("error: {}: {}", self.kind, self.message.replace('\n', " "))
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input("io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::input("io", format!("{}: {e}", path.display())))
}

fn load_problem(path: &Path) -> Result<Problem, Failure> {
    let text = read(path)?;
    let source = path.display().to_string();
    let problem = parse_document(&text)
        .and_then(|doc| doc.to_problem(&source))
        .map_err(|e| Failure::input("parse", format!("{source}: {e}")))?;
    problem.validate().map_err(|e| Failure::input("parse", format!("{source}: {e}")))?;
    Ok(problem)
}

fn load_truth(path: &Path) -> Result<Estimate, Failure> {
    parse_ground_truth(&read(path)?).map_err(|e| Failure::input("parse", format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

pub fn execute(command: &Command) -> Result<i32, Failure> {
    match command {
        Command::Solve(a) => cmd_solve(a),
        Command::Generate(a) => cmd_generate(a).map(|_| EXIT_OK),
        Command::Inject(a) => cmd_inject(a).map(|_| EXIT_OK),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| EXIT_OK),
        Command::Bench(a) => cmd_bench(a).map(|_| EXIT_OK),
    }
}

pub fn cmd_solve(a: &SolveArgs) -> Result<i32, Failure> {
    let t0 = Instant::now();
    let problem = load_problem(&a.input)?;
    let opts = a.solver.options(a.mode, a.init, a.seed);
    opts.validate(problem.d).map_err(|e| Failure::input("usage", e))?;
    let truth = a.ground_truth.as_deref().map(load_truth).transpose()?;
    let injected: Option<InjectionReport> = match &a.injection_report {
        Some(p) => Some(
            serde_json::from_str(&read(p)?).map_err(|e| Failure::input("parse", format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };

    let outcome = solve_problem(&problem, &opts, a.timing);

    let mut metrics = Metrics::default();
    if let Some(est) = &outcome.estimate {
        if let Some(t) = &truth {
            match rmse_ate(est, t) {
                Ok(ate) => {
                    metrics.translation_rmse = Some(ate.translation_rmse);
                    metrics.rotation_rmse_deg = Some(ate.rotation_rmse_deg);
                }
                Err(e) => eprintln!("warning: evaluate: {e}"),
            }
        }
        if let Some(rep) = &injected {
            let (p, r) = precision_recall(&outcome.outliers, &rep.replaced);
            metrics.precision = Some(p);
            metrics.recall = Some(r);
        }
    }
    let mut config = ConfigEcho::new(&a.input.display().to_string(), &opts, problem.d);
    config.allow_uncertified = a.allow_uncertified;
    config.timing = a.timing;
    config.ground_truth = a.ground_truth.as_ref().map(|p| p.display().to_string());
    config.injection_report = a.injection_report.as_ref().map(|p| p.display().to_string());
    let wall_ms = a.timing.then(|| t0.elapsed().as_secs_f64() * 1e3);
    let report = RunReport::new(config, &problem, &outcome, metrics, wall_ms);

    if let Some(path) = &a.report {
        write(path, report.to_json().as_bytes())?;
    }
    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        write_trace_csv(&outcome.trace, &mut buf).map_err(|e| Failure::input("io", e.to_string()))?;
        write(path, &buf)?;
    }
    if let (Some(path), Some(est)) = (&a.output, &outcome.estimate) {
        let text = serialize_with_estimate(&problem, est).map_err(|e| Failure::input("io", e.to_string()))?;
        write(path, text.as_bytes())?;
    }

    println!(
        "status {}, termination {}, {} iterations, {} outliers",
        serde_json::to_value(outcome.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        outcome.termination,
        outcome.trace.len(),
        outcome.outliers.len()
    );
    match outcome.status {
        Status::Failed => Err(Failure {
            code: EXIT_SOLVER,
            kind: "solver",
            message: outcome.error.unwrap_or_else(|| "unknown failure".into()),
        }),
        Status::Uncertified if opts.mode.promises_certificate() && !a.allow_uncertified => {
            let stages: Vec<String> = outcome
                .trace
                .iter()
                .filter(|t| t.certified == Some(false))
                .map(|t| t.iter.to_string())
                .collect();
            Err(Failure {
                code: EXIT_SOLVER,
                kind: "uncertified",
                message: format!("stages [{}] not certified; pass --allow-uncertified to accept", stages.join(",")),
            })
        }
        _ => Ok(EXIT_OK),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), Failure> {
    let spec = a.world.spec();
    let problem = generate_synthetic(&spec, a.seed).map_err(|e| Failure::input("usage", e.to_string()))?;
    // Vertices carry the dead-reckoning guess; ground truth goes to the sidecar.
    let body = serialize_with_estimate(&problem, &problem.odometry_estimate())
        .map_err(|e| Failure::input("usage", e.to_string()))?;
    let header = format!(
        "# synthetic {:?} world: d {}, {} poses, {} landmarks, seed {}\n",
        spec.world,
        spec.d,
        problem.poses.len(),
        problem.landmarks.len(),
        a.seed
    );
    write(&a.output, format!("{header}{body}").as_bytes())?;
    let gt = a.ground_truth.clone().unwrap_or_else(|| with_suffix(&a.output, ".gt"));
    write(&gt, write_ground_truth(&problem.values()).as_bytes())
}

/// Rewrites only the corrupted edge lines so every other byte of the input is kept.
pub fn cmd_inject(a: &InjectArgs) -> Result<(), Failure> {
    let text = read(&a.input)?;
    let source = a.input.display().to_string();
    let doc = parse_document(&text).map_err(|e| Failure::input("parse", format!("{source}: {e}")))?;
    let problem = doc.to_problem(&source).map_err(|e| Failure::input("parse", format!("{source}: {e}")))?;
    let (corrupted, report) = inject_outliers(&problem, a.rate, a.seed).map_err(|e| Failure::input("usage", e.to_string()))?;
    let edge_lines = doc.edge_line_numbers();
    let mut replacement = std::collections::BTreeMap::new();
    for &k in &report.replaced {
        replacement.insert(edge_lines[k], edge_line(problem.d, &corrupted.edges[k].kind));
    }
    let mut out = format!(
        "# outliers injected: rate {}, seed {}, {} of {} non-odometry edges replaced\n",
        a.rate,
        a.seed,
        report.replaced.len(),
        report.eligible
    );
    for (k, line) in text.split_inclusive('\n').enumerate() {
        match replacement.get(&(k + 1)) {
            Some(new) => {
                out.push_str(new);
                out.push('\n');
            }
            None => out.push_str(line),
        }
    }
    write(&a.output, out.as_bytes())?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.output, ".json"));
    let mut json = serde_json::to_string_pretty(&report).expect("report is always serializable");
    json.push('\n');
    write(&report_path, json.as_bytes())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let est = load_problem(&a.estimate)?.values();
    let truth = load_truth(&a.ground_truth)?;
    let ate = rmse_ate(&est, &truth).map_err(|e| Failure::input("evaluate", e.to_string()))?;
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    };
    let json = serde_json::json!({
        "translation_rmse": ate.translation_rmse,
        "rotation_rmse_deg": ate.rotation_rmse_deg,
        "r_align": rows(&ate.r_align),
        "t_align": ate.t_align.as_slice(),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("plain JSON values"));
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let (base, truth, source) = match &a.input {
        Some(path) => {
            let p = load_problem(path)?;
            let t = a.ground_truth.as_deref().map(load_truth).transpose()?;
            (p, t, path.display().to_string())
        }
        None => {
            let spec = a.world.spec();
            let p = generate_synthetic(&spec, a.seed).map_err(|e| Failure::input("usage", e.to_string()))?;
            let t = p.values();
            let source = format!("synthetic {:?}, {} poses, {} landmarks", spec.world, spec.poses, spec.landmarks);
            (p, Some(t), source)
        }
    };
    if a.trials == 0 || a.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Failure::input("usage", "need at least one trial and rates in [0, 1]"));
    }
    let options = a.solver.options(Mode::CertiGnc, Init::Odometry, a.seed);
    options.validate(base.d).map_err(|e| Failure::input("usage", e))?;
    let spec = BenchSpec {
        trials: a.trials,
        rates: a.rates.clone(),
        modes: a.modes.clone(),
        seed: a.seed,
        jobs: a.jobs,
        timing: a.timing,
        options,
    };
    let report = run_bench(&base, truth.as_ref(), &source, &spec);
    if let Some(path) = &a.report {
        write(path, report.to_json().as_bytes())?;
    }
    if let Some(path) = &a.csv {
        let mut buf = Vec::new();
        write_long_csv(&report.trials, &mut buf).map_err(|e| Failure::input("io", e.to_string()))?;
        write(path, &buf)?;
    }
    println!("{:<6} {:<22} {:>6} {:>12} {:>10} {:>10}", "rate", "mode", "failed", "rmse_mean", "precision", "recall");
    for c in &report.cells {
        let mean = |s: &Option<bench::Stats>| s.map(|s| format!("{:.4}", s.mean)).unwrap_or_else(|| "-".into());
        println!(
            "{:<6} {:<22} {:>6} {:>12} {:>10} {:>10}",
            c.rate,
            c.mode,
            c.failed,
            mean(&c.translation_rmse),
            mean(&c.precision),
            mean(&c.recall)
        );
    }
    Ok(())
}
