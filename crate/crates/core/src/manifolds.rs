//! Lifted variable domains: Stiefel row-blocks for rotations, Euclidean rows
//! for translations and landmarks, and their product.
//!
//! A rotation at rank `p` is stored as a `d×p` block with orthonormal rows, so
//! at `p = d` the block is `Rᵀ`. Translations and landmarks are `1×p` rows.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::{polar_factor, sym, LinalgError};
use crate::problem::{Estimate, LandmarkId, Pose, PoseId, Problem};

/// Frobenius tolerance for the row-orthonormality invariant.
pub const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("degenerate input to Stiefel projection: {0}")]
    Degenerate(#[from] LinalgError),
    #[error("block is not row-orthonormal (error {0:e})")]
    Infeasible(f64),
    #[error("rank must satisfy d <= p (d = {d}, p = {p})")]
    Rank { d: usize, p: usize },
    #[error("cannot lift from rank {from} down to {to}")]
    Lift { from: usize, to: usize },
    #[error("layout mismatch")]
    Layout,
    #[error("estimate is missing {0}")]
    MissingVariable(String),
}

/// Identifies a lifted variable block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKey {
    Rotation(PoseId),
    Translation(PoseId),
    Landmark(LandmarkId),
}

impl VarKey {
    fn sort_key(&self) -> (u8, u64, u8) {
        match *self {
            VarKey::Rotation(i) => (0, i, 0),
            VarKey::Translation(i) => (0, i, 1),
            VarKey::Landmark(k) => (1, k, 0),
        }
    }
}

impl Ord for VarKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for VarKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Stiefel,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub key: VarKey,
    pub kind: BlockKind,
    pub offset: usize,
    pub rows: usize,
}

/// Canonical block ordering of the stacked variable `Y ∈ ℝⁿˣᵖ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub blocks: Vec<Block>,
    pub n: usize,
    index: BTreeMap<VarKey, usize>,
}

impl Layout {
    pub fn new(d: usize, keys: impl IntoIterator<Item = VarKey>) -> Self {
        let mut keys: Vec<VarKey> = keys.into_iter().collect();
        keys.sort();
        keys.dedup();
        let mut blocks = Vec::with_capacity(keys.len());
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for key in keys {
            let (kind, rows) = match key {
                VarKey::Rotation(_) => (BlockKind::Stiefel, d),
                _ => (BlockKind::Euclidean, 1),
            };
            index.insert(key, blocks.len());
            blocks.push(Block { key, kind, offset, rows });
            offset += rows;
        }
        Self { d, blocks, n: offset, index }
    }

    pub fn from_problem(problem: &Problem) -> Self {
        let keys = problem
            .poses
            .keys()
            .flat_map(|&i| [VarKey::Rotation(i), VarKey::Translation(i)])
            .chain(problem.landmarks.keys().map(|&k| VarKey::Landmark(k)));
        Self::new(problem.d, keys)
    }

    pub fn block(&self, key: VarKey) -> Option<&Block> {
        self.index.get(&key).map(|&b| &self.blocks[b])
    }

    pub fn offset(&self, key: VarKey) -> Option<usize> {
        self.block(key).map(|b| b.offset)
    }

    pub fn stiefel_blocks(&self) -> impl Iterator<Item = &Block> + '_ {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Stiefel)
    }

    pub fn stiefel_count(&self) -> usize {
        self.stiefel_blocks().count()
    }
}

/// A single `d×p` block with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedStiefelPoint {
    m: DMatrix<f64>,
}

impl LiftedStiefelPoint {
    pub fn new(m: DMatrix<f64>) -> Result<Self, ManifoldError> {
        let (d, p) = m.shape();
        if d > p {
            return Err(ManifoldError::Rank { d, p });
        }
        let err = stiefel_error(&m);
        if !(err <= FEASIBILITY_TOL) {
            return Err(ManifoldError::Infeasible(err));
        }
        Ok(Self { m })
    }

    pub fn d(&self) -> usize {
        self.m.nrows()
    }

    pub fn p(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EuclideanRow {
    pub v: RowDVector<f64>,
}

/// `‖MMᵀ − I‖_F`.
pub fn stiefel_error(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    (m * m.transpose() - DMatrix::<f64>::identity(d, d)).norm()
}

/// Nearest row-orthonormal matrix (polar factor).
pub fn project_to_stiefel(a: &DMatrix<f64>) -> Result<LiftedStiefelPoint, ManifoldError> {
    let (d, p) = a.shape();
    if d > p {
        return Err(ManifoldError::Rank { d, p });
    }
    Ok(LiftedStiefelPoint { m: polar_factor(a)? })
}

/// `G − Sym(G·Yᵀ)·Y` for a single block.
pub fn tangent_project_block(y: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    g - sym(&(g * y.transpose())) * y
}

pub fn tangent_project(y: &LiftedStiefelPoint, g: &DMatrix<f64>) -> DMatrix<f64> {
    tangent_project_block(&y.m, g)
}

/// Stacked lifted point `Y ∈ ℝⁿˣᵖ` on the product manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    pub layout: Arc<Layout>,
    pub y: DMatrix<f64>,
}

/// Tangent vector with the same stacked layout as its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub layout: Arc<Layout>,
    pub v: DMatrix<f64>,
}

impl TangentVector {
    pub fn zeros(layout: Arc<Layout>, p: usize) -> Self {
        let n = layout.n;
        Self { layout, v: DMatrix::zeros(n, p) }
    }

    pub fn norm(&self) -> f64 {
        self.v.norm()
    }

    pub fn inner(&self, other: &TangentVector) -> f64 {
        self.v.dot(&other.v)
    }

    /// Largest `‖MVᵀ + VMᵀ‖_F` over Stiefel blocks at base `y`.
    pub fn tangency_error(&self, y: &ProductPoint) -> f64 {
        self.layout
            .stiefel_blocks()
            .map(|b| {
                let m = y.y.rows(b.offset, b.rows);
                let v = self.v.rows(b.offset, b.rows);
                let s = m * v.transpose();
                (&s + s.transpose()).norm()
            })
            .fold(0.0, f64::max)
    }
}

impl ProductPoint {
    pub fn new(layout: Arc<Layout>, y: DMatrix<f64>) -> Result<Self, ManifoldError> {
        if y.nrows() != layout.n {
            return Err(ManifoldError::Layout);
        }
        if y.ncols() < layout.d {
            return Err(ManifoldError::Rank { d: layout.d, p: y.ncols() });
        }
        let pt = Self { layout, y };
        let err = pt.feasibility_error();
        if !(err <= FEASIBILITY_TOL) {
            return Err(ManifoldError::Infeasible(err));
        }
        Ok(pt)
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn d(&self) -> usize {
        self.layout.d
    }

    /// Largest row-orthonormality error over Stiefel blocks.
    pub fn feasibility_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for b in self.layout.stiefel_blocks() {
            let m = self.y.rows(b.offset, b.rows);
            let e = (m * m.transpose() - DMatrix::<f64>::identity(b.rows, b.rows)).norm();
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        if self.y.iter().any(|x| !x.is_finite()) {
            return f64::INFINITY;
        }
        worst
    }

    pub fn stiefel(&self, key: VarKey) -> Option<LiftedStiefelPoint> {
        let b = self.layout.block(key)?;
        (b.kind == BlockKind::Stiefel).then(|| LiftedStiefelPoint { m: self.y.rows(b.offset, b.rows).into_owned() })
    }

    pub fn euclidean(&self, key: VarKey) -> Option<EuclideanRow> {
        let b = self.layout.block(key)?;
        (b.kind == BlockKind::Euclidean).then(|| EuclideanRow { v: self.y.row(b.offset).into_owned() })
    }

    /// Blockwise tangent projection of an ambient matrix.
    pub fn project(&self, g: &DMatrix<f64>) -> TangentVector {
        let mut v = g.clone();
        for b in self.layout.stiefel_blocks() {
            let m = self.y.rows(b.offset, b.rows).into_owned();
            let gb = g.rows(b.offset, b.rows).into_owned();
            v.rows_mut(b.offset, b.rows).copy_from(&tangent_project_block(&m, &gb));
        }
        TangentVector { layout: self.layout.clone(), v }
    }

    /// Gauge transform `Y·G` for `G ∈ O(p)`.
    pub fn right_multiply(&self, g: &DMatrix<f64>) -> ProductPoint {
        ProductPoint { layout: self.layout.clone(), y: &self.y * g }
    }
}

/// Polar retraction on Stiefel blocks, addition on Euclidean rows.
pub fn retract(y: &ProductPoint, v: &TangentVector, step: f64) -> Result<ProductPoint, ManifoldError> {
    if v.v.shape() != y.y.shape() || !Arc::ptr_eq(&y.layout, &v.layout) && *y.layout != *v.layout {
        return Err(ManifoldError::Layout);
    }
    if step == 0.0 {
        return Ok(y.clone());
    }
    let mut out = &y.y + &v.v * step;
    for b in y.layout.stiefel_blocks() {
        let block = out.rows(b.offset, b.rows).into_owned();
        let q = polar_factor(&block)?;
        out.rows_mut(b.offset, b.rows).copy_from(&q);
    }
    Ok(ProductPoint { layout: y.layout.clone(), y: out })
}

/// Appends `p_new − p` zero columns.
pub fn lift_point(y: &ProductPoint, p_new: usize) -> Result<ProductPoint, ManifoldError> {
    let p = y.p();
    if p_new < p {
        return Err(ManifoldError::Lift { from: p, to: p_new });
    }
    if p_new == p {
        return Ok(y.clone());
    }
    let mut out = DMatrix::zeros(y.y.nrows(), p_new);
    out.columns_mut(0, p).copy_from(&y.y);
    Ok(ProductPoint { layout: y.layout.clone(), y: out })
}

/// Random feasible point: QR-orthonormalized Gaussian Stiefel blocks, Gaussian rows.
pub fn random_point<R: Rng + ?Sized>(layout: Arc<Layout>, p: usize, rng: &mut R) -> ProductPoint {
    let d = layout.d;
    assert!(p >= d, "rank p = {p} below d = {d}");
    let mut y = DMatrix::zeros(layout.n, p);
    for b in &layout.blocks {
        match b.kind {
            BlockKind::Stiefel => {
                let g = DMatrix::<f64>::from_fn(p, d, |_, _| rng.sample(StandardNormal));
                let qr = g.qr();
                let mut q = qr.q();
                let r = qr.r();
                for j in 0..d {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                y.rows_mut(b.offset, d).copy_from(&q.transpose());
            }
            BlockKind::Euclidean => {
                for c in 0..p {
                    y[(b.offset, c)] = rng.sample(StandardNormal);
                }
            }
        }
    }
    ProductPoint { layout, y }
}

/// Rank-`p` point whose first `d` columns hold the estimate (`Rᵀ`, `tᵀ`, `lᵀ`).
pub fn point_from_estimate(layout: Arc<Layout>, est: &Estimate, p: usize) -> Result<ProductPoint, ManifoldError> {
    let d = layout.d;
    if p < d {
        return Err(ManifoldError::Rank { d, p });
    }
    let mut y = DMatrix::zeros(layout.n, p);
    for b in &layout.blocks {
        match b.key {
            VarKey::Rotation(i) => {
                let pose = est.poses.get(&i).ok_or_else(|| ManifoldError::MissingVariable(format!("pose {i}")))?;
                y.view_mut((b.offset, 0), (d, d)).copy_from(&pose.rotation.transpose());
            }
            VarKey::Translation(i) => {
                let pose = est.poses.get(&i).ok_or_else(|| ManifoldError::MissingVariable(format!("pose {i}")))?;
                y.view_mut((b.offset, 0), (1, d)).copy_from(&pose.translation.transpose());
            }
            VarKey::Landmark(k) => {
                let l = est.landmarks.get(&k).ok_or_else(|| ManifoldError::MissingVariable(format!("landmark {k}")))?;
                y.view_mut((b.offset, 0), (1, d)).copy_from(&l.transpose());
            }
        }
    }
    Ok(ProductPoint { layout, y })
}

/// Nearest `SO(d)` matrix to a square block: polar factor, with the smallest
/// singular direction flipped when the determinant is negative.
fn nearest_rotation(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let svd = a.clone().svd(true, true);
    let mut u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    if (&u * &vt).determinant() < 0.0 {
        let smallest = (0..d)
            .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .unwrap_or(d - 1);
        u.column_mut(smallest).neg_mut();
    }
    u * vt
}

/// Rank-`d` rounding: project onto the leading `d` right singular directions,
/// majority determinant vote, then per-block projection to `SO(d)`.
pub fn round_solution(y: &ProductPoint) -> Estimate {
    let d = y.d();
    let layout = &y.layout;
    // A common offset on all Euclidean rows costs nothing and may occupy an
    // extra column; pick the subspace from the centered rows so it cannot
    // displace a rotation direction.
    let euclid: Vec<usize> =
        layout.blocks.iter().filter(|b| b.kind == BlockKind::Euclidean).map(|b| b.offset).collect();
    let mut centered = y.y.clone();
    if !euclid.is_empty() {
        let mut mean = RowDVector::<f64>::zeros(y.p());
        for &r in &euclid {
            mean += y.y.row(r);
        }
        mean /= euclid.len() as f64;
        for &r in &euclid {
            let mut row = centered.row_mut(r);
            row -= &mean;
        }
    }
    let gram = centered.transpose() * &centered;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vd = DMatrix::zeros(y.p(), d);
    for (c, &k) in order.iter().take(d).enumerate() {
        vd.set_column(c, &eig.eigenvectors.column(k));
    }
    let mut xhat = &y.y * vd;

    let mut negative = 0usize;
    let mut total = 0usize;
    for b in layout.stiefel_blocks() {
        let block = xhat.rows(b.offset, d).into_owned();
        if let Ok(q) = polar_factor(&block) {
            total += 1;
            if q.determinant() < 0.0 {
                negative += 1;
            }
        }
    }
    if 2 * negative > total {
        xhat.column_mut(d - 1).neg_mut();
    }

    let mut est = Estimate { d, poses: BTreeMap::new(), landmarks: BTreeMap::new() };
    for b in &layout.blocks {
        match b.key {
            VarKey::Rotation(i) => {
                let block = xhat.rows(b.offset, d).into_owned();
                let rot_t = nearest_rotation(&block);
                est.poses.entry(i).or_insert_with(|| Pose::identity(d)).rotation = rot_t.transpose();
            }
            VarKey::Translation(i) => {
                let t = DVector::from_iterator(d, xhat.row(b.offset).iter().cloned());
                est.poses.entry(i).or_insert_with(|| Pose::identity(d)).translation = t;
            }
            VarKey::Landmark(k) => {
                est.landmarks.insert(k, DVector::from_iterator(d, xhat.row(b.offset).iter().cloned()));
            }
        }
    }
    est
}
