//! Robust pose-graph and landmark SLAM: graduated non-convexity with the
//! truncated-least-squares surrogate, where every weighted subproblem is solved
//! by a Burer–Monteiro Riemannian staircase and checked with a dual certificate.

pub mod linalg;
pub mod manifolds;
pub mod problem;
pub mod rng;
pub mod factor_graph;
pub mod certifier;
pub mod solver;
pub mod gnc;
pub mod io;

pub use certifier::{riemannian_staircase, Eta, LanczosConfig, StaircaseConfig, StaircaseResult};
pub use factor_graph::{assemble_data_matrix, lift_graph, residual_norms, LiftedGraph, SparseDataMatrix};
pub use gnc::{
    gnc_solve, Gap, GncConfig, GncError, GncFailure, GncRecord, GncResult, GncTermination, Initialization, InnerMode,
    Threshold, WarmStart,
};
pub use io::{
    generate_synthetic, inject_outliers, parse_g2o, precision_recall, rmse_ate, serialize_g2o, AteResult, G2oError,
    InjectionReport, SyntheticSpec, World,
};
pub use manifolds::{point_from_estimate, round_solution, ProductPoint};
pub use problem::{EdgeClass, EdgeKind, Estimate, MeasurementEdge, Pose, Problem};
pub use rng::{stream_rng, trial_seed, Stream};
pub use solver::{LocalSolver, SolverConfig};
