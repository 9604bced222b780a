//! Sparse symmetric storage, small dense helpers, and a profile LDLᵀ
//! (envelope Cholesky) with reverse Cuthill-McKee ordering.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is rank deficient (smallest singular value {0:e})")]
    RankDeficient(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Symmetric part `(B + Bᵀ)/2`.
pub fn sym(b: &DMatrix<f64>) -> DMatrix<f64> {
    (b + b.transpose()) * 0.5
}

/// Polar factor `UVᵀ` of a full-row-rank `d×p` matrix (`d ≤ p`).
pub fn polar_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let svd = a.clone().svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-12 * smax.max(1e-300)) || !smin.is_finite() {
        return Err(LinalgError::RankDeficient(smin));
    }
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    Ok(u * vt)
}

/// Symmetric matrix stored as the upper triangle (column ≥ row) in CSR form.
///
/// The sparsity pattern is structural: entries may hold zero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricCsr {
    /// Builds a zero-valued matrix with the given structural entries.
    /// Pairs are canonicalized to the upper triangle and deduplicated.
    pub fn from_pattern(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut upper: Vec<(usize, usize)> = pairs
            .into_iter()
            .map(|(r, c)| if r <= c { (r, c) } else { (c, r) })
            .collect();
        upper.sort_unstable();
        upper.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, c) in &upper {
            assert!(c < n, "pattern entry ({r}, {c}) outside {n}x{n}");
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx: Vec<usize> = upper.iter().map(|&(_, c)| c).collect();
        let values = vec![0.0; col_idx.len()];
        Self { n, row_ptr, col_idx, values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored (upper-triangular) entries.
    pub fn stored_len(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Storage index of entry `(r, c)` (either triangle), if structurally present.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi].binary_search(&c).ok().map(|k| lo + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |k| self.values[k])
    }

    /// Iterates stored upper-triangular entries `(row, col, value)`.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.col_idx[k], self.values[k]))
        })
    }

    /// Structural pairs (upper triangle).
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        self.upper_entries().map(|(r, c, _)| (r, c)).collect()
    }

    /// `out = self * x` for a single vector.
    pub fn mul_slice(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        out.iter_mut().for_each(|o| *o = 0.0);
        for r in 0..self.n {
            let xr = x[r];
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let v = self.values[k];
                acc += v * x[c];
                if c != r {
                    out[c] += v * xr;
                }
            }
            out[r] += acc;
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.mul_slice(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `self * Y` column by column.
    pub fn mul_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(y.nrows(), self.n);
        let mut out = DMatrix::zeros(self.n, y.ncols());
        for c in 0..y.ncols() {
            let src = y.column(c);
            let mut dst = out.column_mut(c);
            self.mul_slice(src.as_slice(), dst.as_mut_slice());
        }
        out
    }

    /// `tr(Yᵀ A Y) = ⟨A, YYᵀ⟩`.
    pub fn quadratic_form(&self, y: &DMatrix<f64>) -> f64 {
        let ay = self.mul_mat(y);
        ay.dot(y)
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.get(i, i)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.upper_entries()
            .map(|(r, c, v)| if r == c { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }

    /// Per-row sums of absolute values (full symmetric row).
    pub fn abs_row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for (r, c, v) in self.upper_entries() {
            sums[r] += v.abs();
            if r != c {
                sums[c] += v.abs();
            }
        }
        sums
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (r, c, v) in self.upper_entries() {
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
        m
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (r, c, _) in self.upper_entries() {
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Reverse Cuthill-McKee permutation of a symmetric pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordering {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inverse[old] = new`
    inverse: Vec<usize>,
}

impl Ordering {
    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect(), inverse: (0..n).collect() }
    }

    pub fn reverse_cuthill_mckee(a: &SymmetricCsr) -> Self {
        let n = a.dim();
        let adj = a.adjacency();
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);

        // Components are processed in order of their lowest-index node.
        for seed in 0..n {
            if visited[seed] {
                continue;
            }
            let start = pseudo_peripheral(&adj, &degree, seed);
            let mut queue = VecDeque::new();
            visited[start] = true;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                order.push(u);
                let mut next: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
                next.sort_by_key(|&v| (degree[v], v));
                for v in next {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        order.reverse();
        let mut inverse = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        Self { perm: order, inverse }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> (Vec<usize>, usize) {
    let mut level = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    level[start] = 0;
    queue.push_back(start);
    let mut last = start;
    while let Some(u) = queue.pop_front() {
        last = u;
        for &v in &adj[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let depth = level[last];
    (level, depth)
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut node = seed;
    let (mut level, mut depth) = bfs_levels(adj, node);
    for _ in 0..8 {
        let candidate = (0..adj.len())
            .filter(|&v| level[v] == depth)
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(node);
        let (next_level, next_depth) = bfs_levels(adj, candidate);
        if next_depth <= depth {
            break;
        }
        node = candidate;
        level = next_level;
        depth = next_depth;
    }
    node
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` stored by rows within the matrix envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    ordering: Ordering,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factors `A + shift·I`. Fails with the offending row when a pivot is not positive.
    pub fn factor(a: &SymmetricCsr, ordering: &Ordering, shift: f64) -> Result<Self, LinalgError> {
        let n = a.dim();
        if ordering.len() != n {
            return Err(LinalgError::Dimension { expected: n, got: ordering.len() });
        }
        let inv = &ordering.inverse;
        let mut first: Vec<usize> = (0..n).collect();
        for (r, c, _) in a.upper_entries() {
            let (i, j) = (inv[r], inv[c]);
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            if lo < first[hi] {
                first[hi] = lo;
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for i in 0..n {
            start.push(total);
            total += i - first[i] + 1;
        }
        start.push(total);
        let mut data = vec![0.0; total];
        for (r, c, v) in a.upper_entries() {
            let (i, j) = (inv[r], inv[c]);
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            data[start[hi] + lo - first[hi]] += v;
        }
        for i in 0..n {
            data[start[i] + i - first[i]] += shift;
        }

        for i in 0..n {
            let fi = first[i];
            let row_i = start[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let row_j = start[j];
                let mut s = data[row_i + j - fi];
                for k in k0..j {
                    s -= data[row_i + k - fi] * data[row_j + k - fj];
                }
                data[row_i + j - fi] = s / data[row_j + j - fj];
            }
            let mut d = data[row_i + i - fi];
            for k in fi..i {
                let l = data[row_i + k - fi];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { row: ordering.perm[i], pivot: d });
            }
            data[row_i + i - fi] = d.sqrt();
        }
        Ok(Self { ordering: ordering.clone(), first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Stored factor entries, a proxy for fill.
    pub fn stored_len(&self) -> usize {
        self.data.len()
    }

    /// Solves `(A + shift·I) x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        let perm = &self.ordering.perm;
        let mut y: Vec<f64> = perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = self.start[i];
            let mut s = y[i];
            for k in fi..i {
                s -= self.data[row + k - fi] * y[k];
            }
            y[i] = s / self.data[row + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.start[i];
            let xi = y[i] / self.data[row + i - fi];
            y[i] = xi;
            for k in fi..i {
                y[k] -= self.data[row + k - fi] * xi;
            }
        }
        for (new, &old) in perm.iter().enumerate() {
            b[old] = y[new];
        }
    }

    /// Solves for every column of `b` in one sweep over the factor.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let m = b.ncols();
        let perm = &self.ordering.perm;
        // Row-major work buffer in factor order.
        let mut y = vec![0.0; n * m];
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..m {
                y[new * m + c] = b[(old, c)];
            }
        }
        let mut acc = vec![0.0; m];
        for i in 0..n {
            let fi = self.first[i];
            let row = self.start[i];
            acc.copy_from_slice(&y[i * m..(i + 1) * m]);
            for k in fi..i {
                let l = self.data[row + k - fi];
                for (a, yk) in acc.iter_mut().zip(&y[k * m..(k + 1) * m]) {
                    *a -= l * yk;
                }
            }
            let piv = self.data[row + i - fi];
            for (dst, a) in y[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *dst = a / piv;
            }
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.start[i];
            let piv = self.data[row + i - fi];
            for v in &mut y[i * m..(i + 1) * m] {
                *v /= piv;
            }
            acc.copy_from_slice(&y[i * m..(i + 1) * m]);
            for k in fi..i {
                let l = self.data[row + k - fi];
                for (yk, a) in y[k * m..(k + 1) * m].iter_mut().zip(&acc) {
                    *yk -= l * a;
                }
            }
        }
        let mut out = DMatrix::zeros(n, m);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..m {
                out[(old, c)] = y[new * m + c];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_laplacian(n: usize) -> SymmetricCsr {
        let mut pairs = Vec::new();
        for i in 0..n {
            pairs.push((i, i));
            if i + 1 < n {
                pairs.push((i, i + 1));
            }
        }
        let mut a = SymmetricCsr::from_pattern(n, pairs);
        for i in 0..n {
            let deg = if i == 0 || i + 1 == n { 1.0 } else { 2.0 };
            let k = a.position(i, i).unwrap();
            a.values_mut()[k] = deg;
            if i + 1 < n {
                let k = a.position(i, i + 1).unwrap();
                a.values_mut()[k] = -1.0;
            }
        }
        a
    }

    #[test]
    fn symmetric_matvec_matches_dense() {
        let a = path_laplacian(7);
        let x = DVector::from_fn(7, |i, _| (i as f64).sin());
        let dense = a.to_dense() * &x;
        assert!((a.mul_vec(&x) - dense).norm() < 1e-14);
    }

    #[test]
    fn cholesky_solves_shifted_laplacian() {
        let a = path_laplacian(30);
        let ord = Ordering::reverse_cuthill_mckee(&a);
        let chol = EnvelopeCholesky::factor(&a, &ord, 0.5).unwrap();
        let b = DVector::from_fn(30, |i, _| 1.0 + i as f64);
        let mut x = b.clone();
        chol.solve_in_place(x.as_mut_slice());
        let resid = a.mul_vec(&x) + &x * 0.5 - &b;
        assert!(resid.norm() < 1e-10 * b.norm());
    }

    #[test]
    fn multi_rhs_solve_matches_columnwise() {
        let a = path_laplacian(25);
        let ord = Ordering::reverse_cuthill_mckee(&a);
        let chol = EnvelopeCholesky::factor(&a, &ord, 0.3).unwrap();
        let b = DMatrix::from_fn(25, 3, |i, j| ((i * 3 + j) as f64).cos());
        let x = chol.solve_mat(&b);
        for c in 0..3 {
            let mut col: Vec<f64> = b.column(c).iter().copied().collect();
            chol.solve_in_place(&mut col);
            for (r, v) in col.iter().enumerate() {
                assert!((x[(r, c)] - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = path_laplacian(5);
        let ord = Ordering::reverse_cuthill_mckee(&a);
        assert!(matches!(
            EnvelopeCholesky::factor(&a, &ord, -0.1),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
        // Singular PSD: zero pivot must not pass as definite.
        assert!(EnvelopeCholesky::factor(&a, &ord, 0.0).is_err());
    }

    #[test]
    fn rcm_keeps_path_banded() {
        let a = path_laplacian(50);
        let ord = Ordering::reverse_cuthill_mckee(&a);
        let chol = EnvelopeCholesky::factor(&a, &ord, 1.0).unwrap();
        assert_eq!(chol.stored_len(), 50 + 49);
    }

    #[test]
    fn polar_of_row_is_normalization() {
        let a = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let q = polar_factor(&a).unwrap();
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15 && (q[(0, 1)] - 0.8).abs() < 1e-15);
        assert!(polar_factor(&DMatrix::zeros(2, 3)).is_err());
    }
}
