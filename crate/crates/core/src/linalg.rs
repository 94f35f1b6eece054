//! Dense linear-algebra helpers shared by the estimator modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(x: &Mat) -> Mat {
    (x + x.transpose()) * 0.5
}

pub fn is_symmetric(x: &Mat, rel_tol: f64) -> bool {
    if !x.is_square() {
        return false;
    }
    let scale = 1.0 + x.norm();
    (x - x.transpose()).norm() <= rel_tol * scale
}

/// Extreme eigenvalues of the symmetric part of `x`.
pub fn sym_eigen_range(x: &Mat) -> (f64, f64) {
    if x.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(symmetrize(x));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn min_eigenvalue(x: &Mat) -> f64 {
    sym_eigen_range(x).0
}

/// Condition estimate from the symmetric spectrum (infinite when singular).
pub fn sym_condition(x: &Mat) -> f64 {
    let (lo, hi) = sym_eigen_range(x);
    if lo.abs() == 0.0 {
        f64::INFINITY
    } else {
        hi.abs().max(lo.abs()) / lo.abs().min(hi.abs())
    }
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(x: &Mat, context: &'static str) -> Result<Mat> {
    let chol = x.clone().cholesky().ok_or_else(|| Error::Singular {
        context,
        condition: sym_condition(x),
    })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `X z = rhs` for symmetric positive definite `X`.
pub fn spd_solve(x: &Mat, rhs: &Mat, context: &'static str) -> Result<Mat> {
    let chol = x.clone().cholesky().ok_or_else(|| Error::Singular {
        context,
        condition: sym_condition(x),
    })?;
    Ok(chol.solve(rhs))
}

/// Symmetric square root `X^{1/2}` (and with `power = -0.5`, the inverse root).
pub fn spd_power(x: &Mat, power: f64, context: &'static str) -> Result<Mat> {
    let eig = SymmetricEigen::new(symmetrize(x));
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite { context });
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|v| v.powf(power)));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Numerical rank with threshold `max(r, c) · ε · σ_max`.
pub fn numerical_rank(x: &Mat) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let thresh = x.nrows().max(x.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > thresh).count()
}

pub fn eigenvalues(x: &Mat) -> Result<Vec<Complex64>> {
    if !x.is_square() {
        return Err(Error::dims("eigenvalues", "square matrix", format!("{}x{}", x.nrows(), x.ncols())));
    }
    if x.nrows() == 0 {
        return Ok(Vec::new());
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure);
    }
    let ev = x.clone().complex_eigenvalues();
    let out: Vec<Complex64> = ev.iter().map(|c| Complex64::new(c.re, c.im)).collect();
    if out.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::EigenFailure);
    }
    Ok(out)
}

pub fn spectral_radius(x: &Mat) -> Result<f64> {
    Ok(eigenvalues(x)?.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Sorts by (real, imaginary) lexicographic order.
pub fn sort_complex(v: &mut [Complex64]) {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
}

/// Multiset comparison of spectra. Each entry of `a` is greedily paired with
/// the nearest unused entry of `b`.
pub fn spectra_match(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut used = vec![false; b.len()];
    let mut sa = a.to_vec();
    sort_complex(&mut sa);
    for x in &sa {
        let best = b
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .min_by(|(_, p), (_, q)| (*p - x).norm().total_cmp(&(*q - x).norm()));
        match best {
            Some((i, y)) if (y - x).norm() <= tol => used[i] = true,
            _ => return false,
        }
    }
    true
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
            }
        }
    }
    out
}

/// Solves the Sylvester equation `A X − X B = C` by vectorisation.
pub fn solve_sylvester(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat> {
    let (n, m) = c.shape();
    if a.shape() != (n, n) || b.shape() != (m, m) {
        return Err(Error::dims("sylvester", format!("A {n}x{n}, B {m}x{m}"), format!("A {:?}, B {:?}", a.shape(), b.shape())));
    }
    // vec(A X) = (I ⊗ A) vec X ; vec(X B) = (Bᵀ ⊗ I) vec X
    let op = kron(&Mat::identity(m, m), a) - kron(&b.transpose(), &Mat::identity(n, n));
    let rhs = Vector::from_column_slice(c.as_slice());
    let lu = op.lu();
    let x = lu.solve(&rhs).ok_or(Error::Singular {
        context: "sylvester operator",
        condition: f64::INFINITY,
    })?;
    Ok(Mat::from_column_slice(n, m, x.as_slice()))
}

/// Solves the discrete Lyapunov equation `Aᵀ P A − P + Q = 0`.
pub fn solve_discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return Err(Error::dims("lyapunov", format!("{n}x{n}"), format!("{:?}", q.shape())));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::NotSchur { spectral_radius: rho });
    }
    // vec(Aᵀ P A) = (Aᵀ ⊗ Aᵀ) vec P
    let at = a.transpose();
    let op = Mat::identity(n * n, n * n) - kron(&at, &at);
    let rhs = Vector::from_column_slice(q.as_slice());
    let x = op.lu().solve(&rhs).ok_or(Error::Singular {
        context: "lyapunov operator",
        condition: f64::INFINITY,
    })?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, x.as_slice())))
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::dims("row-major matrix", format!("{c} columns per row"), "ragged rows"));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}
