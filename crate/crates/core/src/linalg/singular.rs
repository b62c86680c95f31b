use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eigen::{sym_eigen, sym_eigen_decompose};
use super::matrix::{dot, norm2, DenseMatrix};
use crate::error::{Error, Result};

/// A singular value counts as nonzero when it exceeds this fraction of the
/// largest one.
pub const RANK_RELATIVE_THRESHOLD: f64 = 1e-6;

/// Eigenvalue cut-off, relative to the largest, used by [`least_squares`].
pub const PSEUDOINVERSE_THRESHOLD: f64 = 1e-10;

const POWER_ITERATION_SEED: u64 = 0x6f70_6e6f_726d;

/// A linear map that can be applied forwards and transposed without
/// materializing it.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `out = A x`
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`
    fn apply_transpose(&self, y: &[f64], out: &mut [f64]);
}

impl LinearOperator for DenseMatrix {
    fn nrows(&self) -> usize {
        self.rows()
    }

    fn ncols(&self) -> usize {
        self.cols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += yi * a;
            }
        }
    }
}

/// Result of a power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Smallest singular value, via the smaller of `mᵀm` and `mmᵀ`.
pub fn min_singular_value(m: &DenseMatrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidInput(
            "empty matrix has no singular values".into(),
        ));
    }
    let gram = smaller_gram(m);
    Ok(sym_eigen(&gram)?.min().max(0.0).sqrt())
}

/// Singular values in descending order, from the smaller Gram matrix; there
/// are `min(rows, cols)` of them.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Err(Error::InvalidInput(
            "empty matrix has no singular values".into(),
        ));
    }
    let spectrum = sym_eigen(&smaller_gram(m))?;
    Ok(spectrum
        .eigenvalues
        .iter()
        .rev()
        .map(|&l| l.max(0.0).sqrt())
        .collect())
}

/// Number of singular values above `RANK_RELATIVE_THRESHOLD * σ_max`.
pub fn numerical_rank(singular_values: &[f64]) -> usize {
    let top = singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    if top == 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s > RANK_RELATIVE_THRESHOLD * top)
        .count()
}

fn smaller_gram(m: &DenseMatrix) -> DenseMatrix {
    if m.rows() <= m.cols() {
        m.gram_rows()
    } else {
        m.gram_cols()
    }
}

/// Largest singular value of a dense matrix by power iteration on `mᵀm`.
pub fn operator_norm(m: &DenseMatrix, max_iters: usize, rel_tol: f64) -> Result<NormEstimate> {
    if m.max_abs() == 0.0 {
        return Ok(NormEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    operator_norm_of(m, max_iters, rel_tol)
}

/// Power iteration on `AᵀA` for any [`LinearOperator`], starting from a
/// fixed-seed random vector so repeated calls agree bitwise.
pub fn operator_norm_of<A: LinearOperator + ?Sized>(
    op: &A,
    max_iters: usize,
    rel_tol: f64,
) -> Result<NormEstimate> {
    if max_iters == 0 {
        return Err(Error::InvalidInput("max_iters must be at least 1".into()));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidInput("rel_tol must be positive".into()));
    }
    let (rows, cols) = (op.nrows(), op.ncols());
    if rows == 0 || cols == 0 {
        return Ok(NormEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let mut rng =
        ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED ^ (rows as u64) << 20 ^ cols as u64);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut av = vec![0.0; rows];
    let mut atav = vec![0.0; cols];
    normalize(&mut v);

    let mut sigma = 0.0;
    for iter in 1..=max_iters {
        op.apply(&v, &mut av);
        let next = norm2(&av);
        if next == 0.0 {
            // Start vector in the null space; nudge with a fresh draw.
            v.iter_mut().for_each(|x| *x = rng.gen::<f64>() - 0.5);
            normalize(&mut v);
            continue;
        }
        op.apply_transpose(&av, &mut atav);
        let done = iter > 1 && (next - sigma).abs() <= rel_tol * next;
        sigma = next;
        if done {
            return Ok(NormEstimate {
                value: sigma,
                iterations: iter,
                converged: true,
            });
        }
        v.copy_from_slice(&atav);
        if normalize(&mut v) == 0.0 {
            return Ok(NormEstimate {
                value: sigma,
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(NormEstimate {
        value: sigma,
        iterations: max_iters,
        converged: false,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Minimum-norm least-squares solution of `a x ≈ y`.
///
/// Solves the normal equations on whichever Gram matrix is smaller through
/// its eigendecomposition, discarding eigenvalues at or below
/// `PSEUDOINVERSE_THRESHOLD * λ_max`.
pub fn least_squares(a: &DenseMatrix, y: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} right-hand sides for {} rows",
            y.len(),
            a.rows()
        )));
    }
    if a.is_empty() {
        return Ok(vec![0.0; a.cols()]);
    }
    if a.rows() <= a.cols() {
        // x = aᵀ (a aᵀ)⁺ y
        let z = pseudo_solve(&a.gram_rows(), y)?;
        a.matvec_transpose(&z)
    } else {
        // x = (aᵀ a)⁺ aᵀ y
        let rhs = a.matvec_transpose(y)?;
        pseudo_solve(&a.gram_cols(), &rhs)
    }
}

fn pseudo_solve(gram: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let eig = sym_eigen_decompose(gram)?;
    let top = eig.values.iter().fold(0.0_f64, |m, v| m.max(*v));
    let n = rhs.len();
    let mut out = vec![0.0; n];
    if top <= 0.0 {
        return Ok(out);
    }
    let cut = PSEUDOINVERSE_THRESHOLD * top;
    for (k, &lambda) in eig.values.iter().enumerate() {
        if lambda <= cut {
            continue;
        }
        let coeff = (0..n).map(|i| eig.vectors[(i, k)] * rhs[i]).sum::<f64>() / lambda;
        for (i, o) in out.iter_mut().enumerate() {
            *o += coeff * eig.vectors[(i, k)];
        }
    }
    Ok(out)
}
