//! Lifted factor graph, weighted cost/gradient, and sparse data-matrix assembly.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::SymmetricCsr;
use crate::manifolds::{Layout, ProductPoint, TangentVector, VarKey};
use crate::problem::{EdgeKind, Estimate, Problem, ProblemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("rank p = {p} is below the problem dimension d = {d}")]
    Rank { d: usize, p: usize },
    #[error("point layout does not match the graph")]
    Layout,
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weight {index} = {value} outside [0, 1]")]
    WeightRange { index: usize, value: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Row offsets into `Y`: rotation blocks (`d` rows) and translation rows.
    RelativePose {
        rot_i: usize,
        rot_j: usize,
        trans_i: usize,
        trans_j: usize,
        rotation: DMatrix<f64>,
        translation: DVector<f64>,
        kappa: f64,
        tau: f64,
    },
    PoseLandmark {
        rot_i: usize,
        trans_i: usize,
        landmark: usize,
        position: DVector<f64>,
        tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFactor {
    pub kind: FactorKind,
    /// Weight slot for robust factors; `None` means fixed weight 1.
    pub slot: Option<usize>,
}

impl LiftedFactor {
    /// Rows of `Y` touched by the factor, in local order.
    pub fn rows(&self, d: usize) -> Vec<usize> {
        match &self.kind {
            FactorKind::RelativePose { rot_i, rot_j, trans_i, trans_j, .. } => (0..d)
                .map(|r| rot_i + r)
                .chain((0..d).map(|r| rot_j + r))
                .chain([*trans_i, *trans_j])
                .collect(),
            FactorKind::PoseLandmark { rot_i, trans_i, landmark, .. } => {
                (0..d).map(|r| rot_i + r).chain([*trans_i, *landmark]).collect()
            }
        }
    }

    /// Dense local objective block `Q_k` over [`Self::rows`].
    pub fn local_matrix(&self, d: usize) -> DMatrix<f64> {
        match &self.kind {
            FactorKind::RelativePose { rotation, translation, kappa, tau, .. } => {
                let m = 2 * d + 2;
                let mut a = DMatrix::zeros(d, m);
                a.view_mut((0, 0), (d, d)).copy_from(&(-rotation.transpose()));
                a.view_mut((0, d), (d, d)).fill_with_identity();
                let mut b = DMatrix::zeros(1, m);
                for c in 0..d {
                    b[(0, c)] = -translation[c];
                }
                b[(0, 2 * d)] = -1.0;
                b[(0, 2 * d + 1)] = 1.0;
                a.transpose() * &a * *kappa + b.transpose() * &b * *tau
            }
            FactorKind::PoseLandmark { position, tau, .. } => {
                let m = d + 2;
                let mut b = DMatrix::zeros(1, m);
                for c in 0..d {
                    b[(0, c)] = -position[c];
                }
                b[(0, d)] = -1.0;
                b[(0, d + 1)] = 1.0;
                b.transpose() * &b * *tau
            }
        }
    }

    /// Unweighted factor value `ℓ_k(Y)`.
    pub fn value(&self, y: &DMatrix<f64>) -> f64 {
        match &self.kind {
            FactorKind::RelativePose { rot_i, rot_j, trans_i, trans_j, rotation, translation, kappa, tau } => {
                let d = rotation.nrows();
                let yi = y.rows(*rot_i, d);
                let yj = y.rows(*rot_j, d);
                let rot_err = yj - rotation.transpose() * yi;
                let tr_err = y.row(*trans_j) - y.row(*trans_i) - translation.transpose() * yi;
                kappa * rot_err.norm_squared() + tau * tr_err.norm_squared()
            }
            FactorKind::PoseLandmark { rot_i, trans_i, landmark, position, tau } => {
                let d = position.len();
                let yi = y.rows(*rot_i, d);
                let err = y.row(*landmark) - y.row(*trans_i) - position.transpose() * yi;
                tau * err.norm_squared()
            }
        }
    }
}

/// Structural pattern of `Q` plus per-factor scatter lists, so `Q(w)` can be
/// rebuilt (or patched) for any weight vector without re-deriving blocks.
#[derive(Debug, Clone)]
pub struct DataMatrixAssembler {
    template: SymmetricCsr,
    ranges: Vec<Range<usize>>,
    contribs: Vec<(usize, f64)>,
}

impl DataMatrixAssembler {
    fn new(layout: &Layout, factors: &[LiftedFactor]) -> Self {
        let d = layout.d;
        let mut pairs: Vec<(usize, usize)> = (0..layout.n).map(|r| (r, r)).collect();
        for b in layout.stiefel_blocks() {
            for r in 0..b.rows {
                for c in r..b.rows {
                    pairs.push((b.offset + r, b.offset + c));
                }
            }
        }
        let locals: Vec<(Vec<usize>, DMatrix<f64>)> =
            factors.iter().map(|f| (f.rows(d), f.local_matrix(d))).collect();
        for (rows, _) in &locals {
            for &r in rows {
                for &c in rows {
                    if r <= c {
                        pairs.push((r, c));
                    }
                }
            }
        }
        let template = SymmetricCsr::from_pattern(layout.n, pairs);
        let mut ranges = Vec::with_capacity(factors.len());
        let mut contribs = Vec::new();
        for (rows, q) in &locals {
            let start = contribs.len();
            for (a, &r) in rows.iter().enumerate() {
                for (b, &c) in rows.iter().enumerate() {
                    if r <= c {
                        let pos = template.position(r, c).expect("pattern covers factor support");
                        contribs.push((pos, q[(a, b)]));
                    }
                }
            }
            ranges.push(start..contribs.len());
        }
        Self { template, ranges, contribs }
    }

    fn assemble(&self, factor_weights: impl Iterator<Item = f64>) -> SymmetricCsr {
        let mut q = self.template.clone();
        let vals = q.values_mut();
        for (range, w) in self.ranges.iter().zip(factor_weights) {
            if w == 0.0 {
                continue;
            }
            for &(pos, c) in &self.contribs[range.clone()] {
                vals[pos] += w * c;
            }
        }
        q
    }

    /// Adds `Σ δ_k Q_k` in place.
    fn patch(&self, q: &mut SymmetricCsr, deltas: &[(usize, f64)]) {
        let vals = q.values_mut();
        for &(k, delta) in deltas {
            for &(pos, c) in &self.contribs[self.ranges[k].clone()] {
                vals[pos] += delta * c;
            }
        }
    }
}

/// Weighted symmetric objective matrix `Q(w)` with `⟨Q(w), YYᵀ⟩` equal to the
/// weighted factor-cost sum.
#[derive(Debug, Clone)]
pub struct SparseDataMatrix {
    pub layout: Arc<Layout>,
    pub q: SymmetricCsr,
}

impl SparseDataMatrix {
    pub fn n(&self) -> usize {
        self.q.dim()
    }

    pub fn mul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.q.mul_mat(y)
    }

    pub fn cost(&self, y: &DMatrix<f64>) -> f64 {
        self.q.quadratic_form(y)
    }

    pub fn row_range(&self, key: VarKey) -> Option<Range<usize>> {
        self.layout.block(key).map(|b| b.offset..b.offset + b.rows)
    }
}

/// The problem as lifted factors over a rank-`p` product manifold.
#[derive(Debug, Clone)]
pub struct LiftedGraph {
    pub layout: Arc<Layout>,
    pub factors: Vec<LiftedFactor>,
    /// One weight per robust factor, in factor order.
    pub weights: Vec<f64>,
    pub p: usize,
    assembler: Arc<DataMatrixAssembler>,
}

pub fn lift_graph(problem: &Problem, p: usize) -> Result<LiftedGraph, GraphError> {
    let d = problem.d;
    if p < d {
        return Err(GraphError::Rank { d, p });
    }
    problem.validate()?;
    let layout = Arc::new(Layout::from_problem(problem));
    let off = |k: VarKey| layout.offset(k).expect("validated variable");
    let mut factors = Vec::with_capacity(problem.edges.len());
    let mut slots = 0usize;
    for e in &problem.edges {
        let slot = if e.is_robust() {
            slots += 1;
            Some(slots - 1)
        } else {
            None
        };
        let kind = match &e.kind {
            EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau } => FactorKind::RelativePose {
                rot_i: off(VarKey::Rotation(*from)),
                rot_j: off(VarKey::Rotation(*to)),
                trans_i: off(VarKey::Translation(*from)),
                trans_j: off(VarKey::Translation(*to)),
                rotation: rotation.clone(),
                translation: translation.clone(),
                kappa: *kappa,
                tau: *tau,
            },
            EdgeKind::PoseLandmark { pose, landmark, position, tau } => FactorKind::PoseLandmark {
                rot_i: off(VarKey::Rotation(*pose)),
                trans_i: off(VarKey::Translation(*pose)),
                landmark: off(VarKey::Landmark(*landmark)),
                position: position.clone(),
                tau: *tau,
            },
        };
        factors.push(LiftedFactor { kind, slot });
    }
    let assembler = Arc::new(DataMatrixAssembler::new(&layout, &factors));
    Ok(LiftedGraph { layout, factors, weights: vec![1.0; slots], p, assembler })
}

impl LiftedGraph {
    pub fn d(&self) -> usize {
        self.layout.d
    }

    pub fn slot_count(&self) -> usize {
        self.weights.len()
    }

    pub fn factor_weight(&self, k: usize) -> f64 {
        self.factors[k].slot.map_or(1.0, |s| self.weights[s])
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<LiftedGraph, GraphError> {
        check_weights(weights, self.slot_count())?;
        Ok(LiftedGraph { weights: weights.to_vec(), ..self.clone() })
    }

    fn check_layout(&self, y: &ProductPoint) -> Result<(), GraphError> {
        if Arc::ptr_eq(&self.layout, &y.layout) || *self.layout == *y.layout {
            Ok(())
        } else {
            Err(GraphError::Layout)
        }
    }

    /// Per-factor unweighted values `ℓ_k(Y)`.
    pub fn factor_values(&self, y: &ProductPoint) -> Result<Vec<f64>, GraphError> {
        self.check_layout(y)?;
        Ok(self.factors.iter().map(|f| f.value(&y.y)).collect())
    }

    /// Non-robust factor cost plus robust factor values, both unweighted.
    pub fn split_values(&self, y: &ProductPoint) -> Result<(f64, Vec<f64>), GraphError> {
        let vals = self.factor_values(y)?;
        let mut fixed = 0.0;
        let mut robust = vec![0.0; self.slot_count()];
        for (f, v) in self.factors.iter().zip(vals) {
            match f.slot {
                Some(s) => robust[s] = v,
                None => fixed += v,
            }
        }
        Ok((fixed, robust))
    }

    pub fn data_matrix(&self) -> SparseDataMatrix {
        let q = self.assembler.assemble((0..self.factors.len()).map(|k| self.factor_weight(k)));
        SparseDataMatrix { layout: self.layout.clone(), q }
    }
}

fn check_weights(weights: &[f64], expected: usize) -> Result<(), GraphError> {
    if weights.len() != expected {
        return Err(GraphError::WeightCount { expected, got: weights.len() });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
        return Err(GraphError::WeightRange { index, value });
    }
    Ok(())
}

/// `Σ_k w_k ℓ_k(Y)` evaluated from residuals directly.
pub fn evaluate_cost(g: &LiftedGraph, y: &ProductPoint) -> Result<f64, GraphError> {
    g.check_layout(y)?;
    Ok(g.factors.iter().enumerate().map(|(k, f)| g.factor_weight(k) * f.value(&y.y)).sum())
}

/// `Q(w)` for the given robust weights (graph weights are ignored).
pub fn assemble_data_matrix(g: &LiftedGraph, weights: &[f64]) -> Result<SparseDataMatrix, GraphError> {
    check_weights(weights, g.slot_count())?;
    let q = g
        .assembler
        .assemble(g.factors.iter().map(|f| f.slot.map_or(1.0, |s| weights[s])));
    Ok(SparseDataMatrix { layout: g.layout.clone(), q })
}

/// `Q(w′) = Q(w) + Σ (w′_k − w_k) Q_k`, touching only factors whose weight changed.
pub fn reweight_data_matrix(
    g: &LiftedGraph,
    q: &SparseDataMatrix,
    old: &[f64],
    new: &[f64],
) -> Result<SparseDataMatrix, GraphError> {
    check_weights(old, g.slot_count())?;
    check_weights(new, g.slot_count())?;
    let deltas: Vec<(usize, f64)> = g
        .factors
        .iter()
        .enumerate()
        .filter_map(|(k, f)| f.slot.map(|s| (k, new[s] - old[s])))
        .filter(|&(_, delta)| delta != 0.0)
        .collect();
    let mut out = q.clone();
    g.assembler.patch(&mut out.q, &deltas);
    Ok(out)
}

/// Residual `r_i ≥ 0` per robust edge at a rank-`d` estimate.
pub fn residual_norms(problem: &Problem, est: &Estimate) -> Result<Vec<f64>, GraphError> {
    problem
        .edges
        .iter()
        .filter(|e| e.is_robust())
        .map(|e| Ok(e.squared_residual(est)?.sqrt()))
        .collect()
}

/// Unweighted cost of the non-robust (odometry) edges at a rank-`d` estimate.
pub fn fixed_cost(problem: &Problem, est: &Estimate) -> Result<f64, GraphError> {
    problem
        .edges
        .iter()
        .filter(|e| !e.is_robust())
        .map(|e| Ok(e.squared_residual(est)?))
        .sum()
}

/// Blockwise tangent projection of the Euclidean gradient `2·Q(w)·Y`.
pub fn riemannian_gradient(g: &LiftedGraph, y: &ProductPoint) -> Result<TangentVector, GraphError> {
    g.check_layout(y)?;
    let q = g.data_matrix();
    Ok(gradient_with(&q, y))
}

pub fn gradient_with(q: &SparseDataMatrix, y: &ProductPoint) -> TangentVector {
    y.project(&(q.mul(&y.y) * 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::{point_from_estimate, random_point};
    use crate::problem::{axis_angle3, rot2, EdgeClass, MeasurementEdge, Pose};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        if d == 2 {
            rot2(rng.random_range(-3.1..3.1))
        } else {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            axis_angle3(axis, rng.random_range(-3.0..3.0))
        }
    }

    fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Random problem with a chain of odometry, extra loop closures, and landmarks.
    fn random_problem(d: usize, poses: u64, landmarks: u64, extra: usize, rng: &mut ChaCha8Rng) -> Problem {
        let mut p = Problem::new(d).unwrap();
        for i in 0..poses {
            p.poses.insert(i, Pose { rotation: random_rotation(d, rng), translation: random_vec(d, rng) });
        }
        for k in 0..landmarks {
            p.landmarks.insert(k, random_vec(d, rng));
        }
        for i in 0..poses - 1 {
            p.edges.push(MeasurementEdge::relative_pose(
                i,
                i + 1,
                random_rotation(d, rng),
                random_vec(d, rng),
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..5.0),
                EdgeClass::Odometry,
            ));
        }
        for _ in 0..extra {
            let i = rng.random_range(0..poses);
            let mut j = rng.random_range(0..poses);
            if i == j {
                j = (j + 2) % poses;
            }
            p.edges.push(MeasurementEdge::relative_pose(
                i,
                j,
                random_rotation(d, rng),
                random_vec(d, rng),
                rng.random_range(0.5..5.0),
                rng.random_range(0.5..5.0),
                EdgeClass::LoopClosure,
            ));
        }
        for k in 0..landmarks {
            let i = rng.random_range(0..poses);
            p.edges.push(MeasurementEdge::pose_landmark(i, k, random_vec(d, rng), rng.random_range(0.5..5.0)));
        }
        p
    }

    /// Independent dense assembly: each factor as an explicit linear map on vec(Y)
    /// rows, `Q = Σ w_k Σ_rows c·aᵀa` built from residual coefficient rows.
    fn dense_oracle(problem: &Problem, layout: &Layout, weights: &[f64]) -> DMatrix<f64> {
        let d = problem.d;
        let n = layout.n;
        let mut q = DMatrix::zeros(n, n);
        let mut slot = 0;
        for e in &problem.edges {
            let w = if e.is_robust() {
                slot += 1;
                weights[slot - 1]
            } else {
                1.0
            };
            // Residual rows as coefficient vectors over the n rows of Y.
            let mut rows: Vec<(f64, DVector<f64>)> = Vec::new();
            match &e.kind {
                EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau } => {
                    let oi = layout.offset(VarKey::Rotation(*from)).unwrap();
                    let oj = layout.offset(VarKey::Rotation(*to)).unwrap();
                    let ti = layout.offset(VarKey::Translation(*from)).unwrap();
                    let tj = layout.offset(VarKey::Translation(*to)).unwrap();
                    for r in 0..d {
                        // Row r of Y_j − R̃ᵀ Y_i.
                        let mut a = DVector::zeros(n);
                        a[oj + r] += 1.0;
                        for c in 0..d {
                            a[oi + c] -= rotation[(c, r)];
                        }
                        rows.push((*kappa, a));
                    }
                    let mut b = DVector::zeros(n);
                    b[tj] += 1.0;
                    b[ti] -= 1.0;
                    for c in 0..d {
                        b[oi + c] -= translation[c];
                    }
                    rows.push((*tau, b));
                }
                EdgeKind::PoseLandmark { pose, landmark, position, tau } => {
                    let oi = layout.offset(VarKey::Rotation(*pose)).unwrap();
                    let ti = layout.offset(VarKey::Translation(*pose)).unwrap();
                    let lk = layout.offset(VarKey::Landmark(*landmark)).unwrap();
                    let mut b = DVector::zeros(n);
                    b[lk] += 1.0;
                    b[ti] -= 1.0;
                    for c in 0..d {
                        b[oi + c] -= position[c];
                    }
                    rows.push((*tau, b));
                }
            }
            for (c, a) in rows {
                q += &a * a.transpose() * (c * w);
            }
        }
        q
    }

    #[test]
    fn factor_and_slot_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_problem(2, 2, 0, 0, &mut rng);
        let g = lift_graph(&p, 2).unwrap();
        assert_eq!((g.factors.len(), g.slot_count()), (1, 0));
        p = random_problem(2, 5, 0, 0, &mut rng);
        let (r, t) = p.poses[&4].between(&p.poses[&0]);
        p.edges.push(MeasurementEdge::relative_pose(4, 0, r, t, 1.0, 1.0, EdgeClass::LoopClosure));
        let g = lift_graph(&p, 3).unwrap();
        assert_eq!((g.factors.len(), g.slot_count()), (5, 1));
        assert!(lift_graph(&p, 1).is_err());
    }

    #[test]
    fn variable_degrees_match_edge_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_problem(3, 8, 4, 6, &mut rng);
        let g = lift_graph(&p, 3).unwrap();
        let mut expected: BTreeMap<VarKey, usize> = BTreeMap::new();
        for e in &p.edges {
            let vars: BTreeSet<VarKey> = match &e.kind {
                EdgeKind::RelativePose { from, to, .. } => [
                    VarKey::Rotation(*from),
                    VarKey::Translation(*from),
                    VarKey::Rotation(*to),
                    VarKey::Translation(*to),
                ]
                .into(),
                EdgeKind::PoseLandmark { pose, landmark, .. } => {
                    [VarKey::Rotation(*pose), VarKey::Translation(*pose), VarKey::Landmark(*landmark)].into()
                }
            };
            for v in vars {
                *expected.entry(v).or_default() += 1;
            }
        }
        let mut got: BTreeMap<VarKey, usize> = BTreeMap::new();
        for f in &g.factors {
            let rows: BTreeSet<usize> = f.rows(3).into_iter().collect();
            for b in &g.layout.blocks {
                if rows.contains(&b.offset) {
                    *got.entry(b.key).or_default() += 1;
                }
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn cost_matches_dense_oracle_and_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [2, 3] {
            let p = random_problem(d, 3, 2, 2, &mut rng);
            let mut g = lift_graph(&p, d + 2).unwrap();
            g.weights = (0..g.slot_count()).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = random_point(g.layout.clone(), d + 2, &mut rng);
            let direct = evaluate_cost(&g, &y).unwrap();
            let dense = dense_oracle(&p, &g.layout, &g.weights);
            let oracle = (&dense * &y.y * y.y.transpose()).trace();
            let sparse = g.data_matrix().cost(&y.y);
            assert!((direct - oracle).abs() <= 1e-10 * oracle.abs());
            assert!((sparse - oracle).abs() <= 1e-10 * oracle.abs());
            assert!((g.data_matrix().q.to_dense() - dense).norm() <= 1e-12 * (1.0 + direct));
        }
    }

    #[test]
    fn rank_d_cost_equals_problem_space_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [2, 3] {
            let p = random_problem(d, 6, 3, 4, &mut rng);
            let g = lift_graph(&p, d).unwrap();
            let est = p.values();
            let y = point_from_estimate(g.layout.clone(), &est, d).unwrap();
            let lifted = evaluate_cost(&g, &y).unwrap();
            let direct = p.cost(&est).unwrap();
            assert!((lifted - direct).abs() <= 1e-12 * direct);
            let r = residual_norms(&p, &est).unwrap();
            let total: f64 = r.iter().map(|x| x * x).sum::<f64>() + fixed_cost(&p, &est).unwrap();
            assert!((total - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn noiseless_ground_truth_has_zero_cost_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = random_problem(3, 5, 2, 3, &mut rng);
        let gt = p.values();
        for e in &mut p.edges {
            match &mut e.kind {
                EdgeKind::RelativePose { from, to, rotation, translation, .. } => {
                    let (r, t) = gt.poses[from].between(&gt.poses[to]);
                    *rotation = r;
                    *translation = t;
                }
                EdgeKind::PoseLandmark { pose, landmark, position, .. } => {
                    let pi = &gt.poses[pose];
                    *position = pi.rotation.transpose() * (&gt.landmarks[landmark] - &pi.translation);
                }
            }
        }
        let g = lift_graph(&p, 5).unwrap();
        let y = crate::manifolds::lift_point(&point_from_estimate(g.layout.clone(), &gt, 3).unwrap(), 5).unwrap();
        assert!(evaluate_cost(&g, &y).unwrap() < 1e-20);
        assert!(riemannian_gradient(&g, &y).unwrap().norm() < 1e-10);
    }

    #[test]
    fn zero_weights_leave_odometry_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_problem(2, 6, 3, 4, &mut rng);
        let g = lift_graph(&p, 2).unwrap();
        let g0 = g.with_weights(&vec![0.0; g.slot_count()]).unwrap();
        let y = point_from_estimate(g.layout.clone(), &p.values(), 2).unwrap();
        let odo = fixed_cost(&p, &p.values()).unwrap();
        assert!((evaluate_cost(&g0, &y).unwrap() - odo).abs() <= 1e-12 * odo);
    }

    #[test]
    fn all_zero_factor_weights_give_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_problem(2, 4, 0, 3, &mut rng);
        let g = lift_graph(&p, 2).unwrap();
        let q = g.assembler.assemble(std::iter::repeat(0.0));
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_factor_has_gauge_nullspace() {
        for d in [2usize, 3] {
            let mut p = Problem::new(d).unwrap();
            p.poses.insert(0, Pose::identity(d));
            p.poses.insert(1, Pose::identity(d));
            p.edges.push(MeasurementEdge::relative_pose(
                0,
                1,
                DMatrix::identity(d, d),
                DVector::zeros(d),
                1.0,
                1.0,
                EdgeClass::Odometry,
            ));
            let g = lift_graph(&p, d).unwrap();
            let q = g.data_matrix().q.to_dense();
            assert_eq!(q.nrows(), 2 * (d + 1));
            let eig = q.symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&l| l > -1e-12));
            assert_eq!(eig.iter().filter(|&&l| l.abs() < 1e-12).count(), d + 1);
        }
    }

    #[test]
    fn pattern_is_union_of_factor_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_problem(2, 7, 3, 5, &mut rng);
        let g = lift_graph(&p, 2).unwrap();
        let layout = &g.layout;
        let mut expected: BTreeSet<(usize, usize)> = (0..layout.n).map(|r| (r, r)).collect();
        let rows_of = |k: VarKey| {
            let b = layout.block(k).unwrap();
            (b.offset..b.offset + b.rows).collect::<Vec<_>>()
        };
        for b in layout.stiefel_blocks() {
            for r in rows_of(b.key) {
                for c in rows_of(b.key) {
                    expected.insert((r.min(c), r.max(c)));
                }
            }
        }
        for e in &p.edges {
            let vars: Vec<VarKey> = match &e.kind {
                EdgeKind::RelativePose { from, to, .. } => vec![
                    VarKey::Rotation(*from),
                    VarKey::Translation(*from),
                    VarKey::Rotation(*to),
                    VarKey::Translation(*to),
                ],
                EdgeKind::PoseLandmark { pose, landmark, .. } => {
                    vec![VarKey::Rotation(*pose), VarKey::Translation(*pose), VarKey::Landmark(*landmark)]
                }
            };
            let rows: Vec<usize> = vars.into_iter().flat_map(rows_of).collect();
            for &r in &rows {
                for &c in &rows {
                    expected.insert((r.min(c), r.max(c)));
                }
            }
        }
        let got: BTreeSet<(usize, usize)> = g.data_matrix().q.pattern().into_iter().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn incremental_reweight_matches_full_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_problem(3, 6, 4, 5, &mut rng);
        let g = lift_graph(&p, 3).unwrap();
        let w0: Vec<f64> = (0..g.slot_count()).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut w1 = w0.clone();
        w1[0] = 0.0;
        w1[3] = 1.0;
        let q0 = assemble_data_matrix(&g, &w0).unwrap();
        let patched = reweight_data_matrix(&g, &q0, &w0, &w1).unwrap();
        let full = assemble_data_matrix(&g, &w1).unwrap();
        let diff: f64 = patched.q.values().iter().zip(full.q.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
        assert!(assemble_data_matrix(&g, &[2.0; 9]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for d in [2, 3] {
            for p in [d, d + 2] {
                let prob = random_problem(d, 5, 2, 3, &mut rng);
                let g = lift_graph(&prob, p).unwrap();
                let y = random_point(g.layout.clone(), p, &mut rng);
                let grad = riemannian_gradient(&g, &y).unwrap();
                assert!(grad.tangency_error(&y) < 1e-10);
                let v = y.project(&DMatrix::from_fn(g.layout.n, p, |_, _| rng.random_range(-1.0..1.0)));
                let h = 1e-6;
                let fp = evaluate_cost(&g, &crate::manifolds::retract(&y, &v, h).unwrap()).unwrap();
                let fm = evaluate_cost(&g, &crate::manifolds::retract(&y, &v, -h).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let exact = grad.inner(&v);
                assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1.0), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn cost_is_gauge_invariant_and_affine_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prob = random_problem(2, 5, 2, 3, &mut rng);
        let g = lift_graph(&prob, 4).unwrap();
        let y = random_point(g.layout.clone(), 4, &mut rng);
        let gauge = crate::manifolds::project_to_stiefel(&DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap()
            .into_matrix();
        let a = evaluate_cost(&g, &y).unwrap();
        let b = evaluate_cost(&g, &y.right_multiply(&gauge)).unwrap();
        assert!((a - b).abs() <= 1e-10 * a);
        for s in 0..g.slot_count() {
            let cost_at = |w: f64| {
                let mut ws = vec![0.5; g.slot_count()];
                ws[s] = w;
                evaluate_cost(&g.with_weights(&ws).unwrap(), &y).unwrap()
            };
            let (c0, c5, c1) = (cost_at(0.0), cost_at(0.5), cost_at(1.0));
            assert!((c5 - 0.5 * (c0 + c1)).abs() <= 1e-10 * c5);
        }
    }
}
