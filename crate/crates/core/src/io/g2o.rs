//! g2o text format: `VERTEX_SE2`, `EDGE_SE2`, `VERTEX_XY`, `EDGE_SE2_XY`,
//! `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::problem::{
    angle2, matrix_to_quat, quat_to_matrix, rot2, EdgeClass, EdgeKind, MeasurementEdge, Pose, Problem, ProblemError,
};

/// Accepted deviation of a quaternion's norm from one before normalizing.
pub const QUATERNION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum G2oErrorKind {
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("`{tag}` expects {expected} fields, found {found}")]
    Arity { tag: String, expected: usize, found: usize },
    #[error("cannot parse `{0}` as a number")]
    Number(String),
    #[error("cannot parse `{0}` as a vertex id")]
    Id(String),
    #[error("information matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("reference to undeclared vertex {0}")]
    DanglingVertex(u64),
    #[error("duplicate vertex id {0}")]
    DuplicateVertex(u64),
    #[error("quaternion norm {0} too far from 1")]
    QuaternionNorm(f64),
    #[error("document mixes 2D and 3D records")]
    MixedDimension,
    #[error("edge connects vertex {0} to itself")]
    SelfLoop(u64),
    #[error("document declares no vertices")]
    Empty,
    #[error("landmarks are only supported in 2D")]
    Unsupported,
}

/// A parse error located at a 1-based line and column.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}, column {column}: {kind}")]
pub struct G2oError {
    pub line: usize,
    pub column: usize,
    pub kind: G2oErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Comment(String),
    PoseVertex { id: u64, pose: Pose },
    LandmarkVertex { id: u64, position: DVector<f64> },
    PoseEdge { from: u64, to: u64, rotation: DMatrix<f64>, translation: DVector<f64>, information: DMatrix<f64> },
    LandmarkEdge { pose: u64, landmark: u64, position: DVector<f64>, information: DMatrix<f64> },
}

/// Typed records in file order, with their line numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct G2oDocument {
    pub d: usize,
    pub records: Vec<(usize, Record)>,
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Token { text: &line[s..i], column: line[..s].chars().count() + 1 });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token { text: &line[s..], column: line[..s].chars().count() + 1 });
    }
    out
}

struct LineCursor<'a> {
    line: usize,
    tokens: Vec<Token<'a>>,
}

impl<'a> LineCursor<'a> {
    fn err(&self, column: usize, kind: G2oErrorKind) -> G2oError {
        G2oError { line: self.line, column, kind }
    }

    fn num(&self, k: usize) -> Result<f64, G2oError> {
        let t = &self.tokens[k];
        match t.text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(t.column, G2oErrorKind::Number(t.text.to_string()))),
        }
    }

    fn id(&self, k: usize) -> Result<u64, G2oError> {
        let t = &self.tokens[k];
        t.text.parse::<u64>().map_err(|_| self.err(t.column, G2oErrorKind::Id(t.text.to_string())))
    }

    fn nums(&self, range: std::ops::Range<usize>) -> Result<Vec<f64>, G2oError> {
        range.map(|k| self.num(k)).collect()
    }

    fn col(&self, k: usize) -> usize {
        self.tokens[k].column
    }

    fn quaternion(&self, k: usize) -> Result<DMatrix<f64>, G2oError> {
        let q = self.nums(k..k + 4)?;
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOL {
            return Err(self.err(self.col(k), G2oErrorKind::QuaternionNorm(norm)));
        }
        Ok(quat_to_matrix(q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm))
    }

    /// Reads an upper-triangular row-major `n×n` information matrix.
    fn information(&self, k: usize, n: usize) -> Result<DMatrix<f64>, G2oError> {
        let vals = self.nums(k..k + n * (n + 1) / 2)?;
        let mut m = DMatrix::zeros(n, n);
        let mut it = vals.into_iter();
        for r in 0..n {
            for c in r..n {
                let v = it.next().expect("arity checked");
                m[(r, c)] = v;
                m[(c, r)] = v;
            }
        }
        if m.clone().cholesky().is_none() {
            return Err(self.err(self.col(k), G2oErrorKind::NotPositiveDefinite));
        }
        Ok(m)
    }
}

fn tag_info(tag: &str) -> Option<(usize, usize)> {
    // (dimension, field count after the tag)
    match tag {
        "VERTEX_SE2" => Some((2, 4)),
        "EDGE_SE2" => Some((2, 11)),
        "VERTEX_XY" => Some((2, 3)),
        "EDGE_SE2_XY" => Some((2, 7)),
        "VERTEX_SE3:QUAT" => Some((3, 8)),
        "EDGE_SE3:QUAT" => Some((3, 30)),
        _ => None,
    }
}

/// Parses text into typed records, checking per-line grammar, vertex uniqueness
/// and references.
pub fn parse_document(text: &str) -> Result<G2oDocument, G2oError> {
    let mut d: Option<usize> = None;
    let mut records = Vec::new();
    let mut poses: BTreeSet<u64> = BTreeSet::new();
    let mut landmarks: BTreeSet<u64> = BTreeSet::new();
    // Deferred reference checks: (vertex id, is landmark, line, column).
    let mut refs: Vec<(u64, bool, usize, usize)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = trimmed.strip_prefix('#') {
            records.push((k + 1, Record::Comment(c.trim().to_string())));
            continue;
        }
        let cur = LineCursor { line: k + 1, tokens: tokenize(raw) };
        let tag = cur.tokens[0].text;
        let Some((dim, fields)) = tag_info(tag) else {
            return Err(cur.err(cur.col(0), G2oErrorKind::UnknownTag(tag.to_string())));
        };
        if cur.tokens.len() != fields + 1 {
            let column = cur.tokens.get(fields + 1).map_or(raw.chars().count() + 1, |t| t.column);
            return Err(cur.err(
                column,
                G2oErrorKind::Arity { tag: tag.to_string(), expected: fields, found: cur.tokens.len() - 1 },
            ));
        }
        match d {
            Some(prev) if prev != dim => return Err(cur.err(cur.col(0), G2oErrorKind::MixedDimension)),
            _ => d = Some(dim),
        }
        let record = match tag {
            "VERTEX_SE2" => {
                let v = cur.nums(2..5)?;
                Record::PoseVertex { id: cur.id(1)?, pose: Pose::planar(v[0], v[1], v[2]) }
            }
            "VERTEX_SE3:QUAT" => {
                let t = cur.nums(2..5)?;
                let rotation = cur.quaternion(5)?;
                Record::PoseVertex { id: cur.id(1)?, pose: Pose { rotation, translation: DVector::from_vec(t) } }
            }
            "VERTEX_XY" => Record::LandmarkVertex { id: cur.id(1)?, position: DVector::from_vec(cur.nums(2..4)?) },
            "EDGE_SE2" => {
                let v = cur.nums(3..6)?;
                Record::PoseEdge {
                    from: cur.id(1)?,
                    to: cur.id(2)?,
                    rotation: rot2(v[2]),
                    translation: DVector::from_vec(v[..2].to_vec()),
                    information: cur.information(6, 3)?,
                }
            }
            "EDGE_SE3:QUAT" => Record::PoseEdge {
                from: cur.id(1)?,
                to: cur.id(2)?,
                translation: DVector::from_vec(cur.nums(3..6)?),
                rotation: cur.quaternion(6)?,
                information: cur.information(10, 6)?,
            },
            "EDGE_SE2_XY" => Record::LandmarkEdge {
                pose: cur.id(1)?,
                landmark: cur.id(2)?,
                position: DVector::from_vec(cur.nums(3..5)?),
                information: cur.information(5, 2)?,
            },
            _ => unreachable!("tag table covers every accepted tag"),
        };
        match &record {
            Record::PoseVertex { id, .. } => {
                if !poses.insert(*id) {
                    return Err(cur.err(cur.col(1), G2oErrorKind::DuplicateVertex(*id)));
                }
            }
            Record::LandmarkVertex { id, .. } => {
                if !landmarks.insert(*id) {
                    return Err(cur.err(cur.col(1), G2oErrorKind::DuplicateVertex(*id)));
                }
            }
            Record::PoseEdge { from, to, .. } => {
                if from == to {
                    return Err(cur.err(cur.col(2), G2oErrorKind::SelfLoop(*from)));
                }
                refs.push((*from, false, cur.line, cur.col(1)));
                refs.push((*to, false, cur.line, cur.col(2)));
            }
            Record::LandmarkEdge { pose, landmark, .. } => {
                refs.push((*pose, false, cur.line, cur.col(1)));
                refs.push((*landmark, true, cur.line, cur.col(2)));
            }
            Record::Comment(_) => {}
        }
        records.push((k + 1, record));
    }
    for (id, is_landmark, line, column) in refs {
        let known = if is_landmark { landmarks.contains(&id) } else { poses.contains(&id) };
        if !known {
            return Err(G2oError { line, column, kind: G2oErrorKind::DanglingVertex(id) });
        }
    }
    let Some(d) = d.filter(|_| !poses.is_empty()) else {
        return Err(G2oError { line: 1, column: 1, kind: G2oErrorKind::Empty });
    };
    Ok(G2oDocument { d, records })
}

/// Isotropic `(κ, τ)` from a pose-edge information matrix ordered
/// translation-first: `τ` is the mean translational diagonal and `κ` the mean
/// rotational diagonal.
pub fn extract_precisions(information: &DMatrix<f64>, d: usize) -> Result<(f64, f64), ProblemError> {
    let n = information.nrows();
    if n != d + d * (d - 1) / 2 || information.ncols() != n {
        return Err(ProblemError::Dimension(n));
    }
    if information.clone().cholesky().is_none() {
        return Err(ProblemError::Precision { edge: 0 });
    }
    let tau = (0..d).map(|k| information[(k, k)]).sum::<f64>() / d as f64;
    let kappa = (d..n).map(|k| information[(k, k)]).sum::<f64>() / (n - d) as f64;
    Ok((kappa, tau))
}

/// Whether a diagonal-block-isotropic matrix already carries the scalar precisions.
fn is_isotropic(information: &DMatrix<f64>, d: usize) -> bool {
    let n = information.nrows();
    let same = |r: std::ops::Range<usize>| r.clone().all(|k| information[(k, k)] == information[(r.start, r.start)]);
    let diagonal = (0..n).all(|r| (0..n).all(|c| r == c || information[(r, c)] == 0.0));
    diagonal && same(0..d) && same(d..n)
}

impl G2oDocument {
    /// Line number of each edge record, in edge order.
    pub fn edge_line_numbers(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|(_, r)| matches!(r, Record::PoseEdge { .. } | Record::LandmarkEdge { .. }))
            .map(|(line, _)| *line)
            .collect()
    }

    /// Builds a problem: `j = i + 1` pose edges are odometry, other pose edges
    /// loop closures, and landmark edges pose–landmark.
    pub fn to_problem(&self, source: &str) -> Result<Problem, G2oError> {
        let d = self.d;
        let mut problem = Problem::new(d).expect("parser only yields d = 2 or 3");
        problem.meta.source = source.to_string();
        for (line, rec) in &self.records {
            let located = |kind| G2oError { line: *line, column: 1, kind };
            match rec {
                Record::Comment(_) => {}
                Record::PoseVertex { id, pose } => {
                    problem.poses.insert(*id, pose.clone());
                }
                Record::LandmarkVertex { id, position } => {
                    if d != 2 {
                        return Err(located(G2oErrorKind::Unsupported));
                    }
                    problem.landmarks.insert(*id, position.clone());
                }
                Record::PoseEdge { from, to, rotation, translation, information } => {
                    let (kappa, tau) =
                        extract_precisions(information, d).map_err(|_| located(G2oErrorKind::NotPositiveDefinite))?;
                    if !is_isotropic(information, d) {
                        problem.meta.isotropized_edges += 1;
                    }
                    let class = if *to == from + 1 { EdgeClass::Odometry } else { EdgeClass::LoopClosure };
                    problem.edges.push(MeasurementEdge::relative_pose(
                        *from,
                        *to,
                        rotation.clone(),
                        translation.clone(),
                        kappa,
                        tau,
                        class,
                    ));
                }
                Record::LandmarkEdge { pose, landmark, position, information } => {
                    let tau = information.trace() / d as f64;
                    if information[(0, 1)] != 0.0 || information[(0, 0)] != information[(1, 1)] {
                        problem.meta.isotropized_edges += 1;
                    }
                    problem.edges.push(MeasurementEdge::pose_landmark(*pose, *landmark, position.clone(), tau));
                }
            }
        }
        Ok(problem)
    }
}

pub fn parse_g2o(text: &str) -> Result<Problem, G2oError> {
    parse_document(text)?.to_problem("")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SerializeError {
    #[error("landmarks are only supported in 2D")]
    Unsupported,
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the problem's pose/landmark values and edges. Information matrices
/// are written diagonal with the isotropic precisions.
pub fn serialize_g2o(problem: &Problem) -> Result<String, SerializeError> {
    let d = problem.d;
    if d == 3 && (!problem.landmarks.is_empty() || problem.count_class(EdgeClass::PoseLandmark) > 0) {
        return Err(SerializeError::Unsupported);
    }
    let mut out = String::new();
    if problem.meta.isotropized_edges > 0 {
        let _ = writeln!(
            out,
            "# information matrices of {} edges were reduced to isotropic precisions",
            problem.meta.isotropized_edges
        );
    }
    write_vertices(&mut out, d, &problem.poses, &problem.landmarks);
    for e in &problem.edges {
        out.push_str(&edge_line(d, &e.kind));
        out.push('\n');
    }
    Ok(out)
}

/// One `EDGE_*` line (no trailing newline) with a diagonal isotropic
/// information matrix.
pub fn edge_line(d: usize, kind: &EdgeKind) -> String {
    match kind {
        EdgeKind::RelativePose { from, to, rotation, translation, kappa, tau } => {
            let (t, k) = (f(*tau), f(*kappa));
            if d == 2 {
                format!(
                    "EDGE_SE2 {from} {to} {} {} {} {t} 0 0 {t} 0 {k}",
                    f(translation[0]),
                    f(translation[1]),
                    f(angle2(rotation))
                )
            } else {
                let q = matrix_to_quat(rotation);
                let info = format!("{t} 0 0 0 0 0 {t} 0 0 0 0 {t} 0 0 0 {k} 0 0 {k} 0 {k}");
                format!(
                    "EDGE_SE3:QUAT {from} {to} {} {} {} {} {} {} {} {info}",
                    f(translation[0]),
                    f(translation[1]),
                    f(translation[2]),
                    f(q[0]),
                    f(q[1]),
                    f(q[2]),
                    f(q[3])
                )
            }
        }
        EdgeKind::PoseLandmark { pose, landmark, position, tau } => {
            let t = f(*tau);
            format!("EDGE_SE2_XY {pose} {landmark} {} {} {t} 0 {t}", f(position[0]), f(position[1]))
        }
    }
}

fn write_vertices(
    out: &mut String,
    d: usize,
    poses: &BTreeMap<u64, Pose>,
    landmarks: &BTreeMap<u64, DVector<f64>>,
) {
    for (id, p) in poses {
        let t = &p.translation;
        if d == 2 {
            let _ = writeln!(out, "VERTEX_SE2 {id} {} {} {}", f(t[0]), f(t[1]), f(angle2(&p.rotation)));
        } else {
            let q = matrix_to_quat(&p.rotation);
            let _ = writeln!(
                out,
                "VERTEX_SE3:QUAT {id} {} {} {} {} {} {} {}",
                f(t[0]),
                f(t[1]),
                f(t[2]),
                f(q[0]),
                f(q[1]),
                f(q[2]),
                f(q[3])
            );
        }
    }
    for (id, l) in landmarks {
        let _ = writeln!(out, "VERTEX_XY {id} {} {}", f(l[0]), f(l[1]));
    }
}

/// Replaces the vertex values of a problem with an estimate and serializes it.
pub fn serialize_with_estimate(problem: &Problem, est: &crate::problem::Estimate) -> Result<String, SerializeError> {
    let mut solved = problem.clone();
    solved.poses = est.poses.clone();
    solved.landmarks = est.landmarks.clone();
    serialize_g2o(&solved)
}
