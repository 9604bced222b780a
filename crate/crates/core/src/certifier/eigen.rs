//! Smallest eigenpair of a symmetric operator by thick-restart Lanczos on the
//! shifted operator `σI − S`, with full reorthogonalization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::SymmetricCsr;

pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Upper bound on the largest eigenvalue.
    fn gershgorin_upper(&self) -> f64;
}

impl SymmetricOperator for SymmetricCsr {
    fn dim(&self) -> usize {
        SymmetricCsr::dim(self)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.mul_slice(x, out);
    }

    fn gershgorin_upper(&self) -> f64 {
        let diag = self.diagonal();
        self.abs_row_sums()
            .iter()
            .zip(diag.iter())
            .map(|(s, &a)| a + (s - a.abs()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let y = self * DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
    }

    fn gershgorin_upper(&self) -> f64 {
        (0..self.nrows())
            .map(|i| {
                let off: f64 = (0..self.ncols()).filter(|&j| j != i).map(|j| self[(i, j)].abs()).sum();
                self[(i, i)] + off
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanczosConfig {
    /// Converged when `‖Sv − λv‖ ≤ tol·(|σ| + |λ|)`.
    pub tol: f64,
    pub max_basis: usize,
    /// Ritz vectors retained at each restart.
    pub keep: usize,
    pub max_matvecs: usize,
    pub seed: u64,
    /// Stop as soon as a Ritz value falls below this threshold. Ritz values of
    /// `σI − S` bound `λ_min(S)` from above, so the early answer is conclusive.
    pub stop_below: Option<f64>,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_basis: 120, keep: 40, max_matvecs: 4000, seed: 0, stop_below: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: DVector<f64>,
    /// `‖Sv − λv‖` of the returned pair.
    pub residual: f64,
    pub matvecs: usize,
    pub shift: f64,
    /// True when the pair was returned by `stop_below` before convergence.
    pub early_stop: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EigenError {
    #[error("empty operator")]
    Empty,
    #[error("eigensolver did not converge after {} matvecs (best residual {:e})", best.matvecs, best.residual)]
    NotConverged { best: Box<EigenPair> },
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v / norm
}

/// Algebraically smallest eigenpair of `op`.
pub fn min_eigenpair<S: SymmetricOperator + ?Sized>(op: &S, cfg: &LanczosConfig) -> Result<EigenPair, EigenError> {
    let n = op.dim();
    if n == 0 {
        return Err(EigenError::Empty);
    }
    let sigma = op.gershgorin_upper().max(0.0);
    let mut scratch = vec![0.0; n];
    let apply_b = |x: &DVector<f64>, scratch: &mut Vec<f64>| -> DVector<f64> {
        op.apply(x.as_slice(), scratch);
        DVector::from_fn(n, |i, _| sigma * x[i] - scratch[i])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.max_basis.clamp(2, n.max(2)).min(n);
    let keep = cfg.keep.clamp(1, m.saturating_sub(1).max(1));
    let mut basis = DMatrix::<f64>::zeros(n, m + 1);
    let mut t = DMatrix::<f64>::zeros(m, m);
    basis.set_column(0, &random_unit(n, &mut rng));
    let mut cur = 0usize;
    let mut matvecs = 0usize;
    let breakdown_tol = 1e-12 * sigma.max(1e-300);
    let pair = |basis: &DMatrix<f64>, cols: usize, u: &DVector<f64>, scratch: &mut Vec<f64>, matvecs: usize, early: bool| {
        let mut x = basis.columns(0, cols) * u;
        let norm = x.norm();
        x /= norm;
        op.apply(x.as_slice(), scratch);
        let sx = DVector::from_column_slice(scratch);
        let value = x.dot(&sx);
        let residual = (&sx - &x * value).norm();
        EigenPair { value, vector: x, residual, matvecs: matvecs + 1, shift: sigma, early_stop: early }
    };

    loop {
        // Expand the Krylov basis to `m` columns (or until the whole space is spanned).
        let mut built = m;
        let mut coupling = 0.0;
        let mut j = cur;
        while j < m {
            let vj = basis.column(j).into_owned();
            let mut w = apply_b(&vj, &mut scratch);
            matvecs += 1;
            let mut h = basis.columns(0, j + 1).tr_mul(&w);
            w -= basis.columns(0, j + 1) * &h;
            let h2 = basis.columns(0, j + 1).tr_mul(&w);
            w -= basis.columns(0, j + 1) * &h2;
            h += h2;
            // Retained Ritz columns (< cur) keep their diagonal form.
            for i in 0..=j {
                t[(i, j)] = h[i];
                t[(j, i)] = h[i];
            }
            let beta = w.norm();
            if j + 1 == n {
                built = n;
                coupling = 0.0;
                break;
            }
            if beta <= breakdown_tol {
                // Invariant subspace: continue from a fresh orthogonal direction.
                let mut r = random_unit(n, &mut rng);
                for _ in 0..2 {
                    let c = basis.columns(0, j + 1).tr_mul(&r);
                    r -= basis.columns(0, j + 1) * c;
                }
                let rn = r.norm();
                basis.set_column(j + 1, &(r / rn));
                if j + 1 == m {
                    coupling = 0.0;
                }
            } else {
                basis.set_column(j + 1, &(w / beta));
                if j + 1 == m {
                    coupling = beta;
                }
            }
            j += 1;
        }

        let tm = t.view((0, 0), (built, built)).into_owned();
        let eig = tm.symmetric_eigen();
        let mut order: Vec<usize> = (0..built).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = order[0];
        let theta = eig.eigenvalues[top];
        let lambda = sigma - theta;
        let u = eig.eigenvectors.column(top).into_owned();
        let est_residual = coupling * u[built - 1].abs();
        let full_space = built == n;

        if full_space || est_residual <= cfg.tol * (sigma.abs() + lambda.abs()) {
            return Ok(pair(&basis, built, &u, &mut scratch, matvecs, false));
        }
        if let Some(threshold) = cfg.stop_below {
            if lambda < threshold {
                return Ok(pair(&basis, built, &u, &mut scratch, matvecs, true));
            }
        }
        if matvecs >= cfg.max_matvecs {
            let best = pair(&basis, built, &u, &mut scratch, matvecs, false);
            return Err(EigenError::NotConverged { best: Box::new(best) });
        }

        // Thick restart: keep the leading Ritz vectors plus the residual direction.
        let mut kept = DMatrix::<f64>::zeros(built, keep);
        for (c, &idx) in order.iter().take(keep).enumerate() {
            kept.set_column(c, &eig.eigenvectors.column(idx));
        }
        let ritz = basis.columns(0, built) * &kept;
        let residual_vec = basis.column(built).into_owned();
        basis.columns_mut(0, keep).copy_from(&ritz);
        basis.set_column(keep, &residual_vec);
        t.fill(0.0);
        for (c, &idx) in order.iter().take(keep).enumerate() {
            t[(c, c)] = eig.eigenvalues[idx];
        }
        cur = keep;
    }
}
