//! Small dense complex linear-algebra helpers used across the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn trace(m: &CMat) -> C64 {
    m.diagonal().sum()
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest |aᵢⱼ − āⱼᵢ| over all entries; 0 for an exactly Hermitian matrix.
pub fn hermiticity_residual(m: &CMat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in i..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn check_hermitian(m: &CMat, tolerance: f64) -> Result<()> {
    let residual = hermiticity_residual(m);
    if residual > tolerance {
        return Err(Error::MatrixProperty {
            property: "Hermitian",
            residual,
            tolerance,
        });
    }
    Ok(())
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn anticommutator(a: &CMat, b: &CMat) -> CMat {
    a * b + b * a
}

/// Eigendecomposition of a Hermitian matrix: returns (eigenvalues, V) with
/// m = V · diag(λ) · V†. Eigenvalues are sorted ascending.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let n = m.nrows();
    let vectors = CMat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

/// exp(−i·θ·H) for Hermitian H, computed exactly through the eigenbasis.
pub fn unitary_from_hermitian(h: &CMat, theta: f64) -> CMat {
    let (values, v) = hermitian_eigen(h);
    let phases = CVec::from_iterator(
        values.len(),
        values.iter().map(|&e| (-I * c(theta * e)).exp()),
    );
    &v * CMat::from_diagonal(&phases) * v.adjoint()
}

/// exp(scale·H) for Hermitian H through its eigendecomposition.
pub fn exp_hermitian(h: &CMat, scale: f64) -> CMat {
    let (values, v) = hermitian_eigen(h);
    let weights = CVec::from_iterator(
        values.len(),
        values.iter().map(|&e| c((scale * e).exp())),
    );
    &v * CMat::from_diagonal(&weights) * v.adjoint()
}

/// Apply a diagonal operator elementwise: diag(d) · m.
pub fn scale_rows(d: &DVector<f64>, m: &CMat) -> CMat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] *= c(d[i]);
        }
    }
    out
}

/// Commutator [diag(d), m], which acts elementwise as (dᵢ − dⱼ)·mᵢⱼ.
pub fn diagonal_commutator(d: &DVector<f64>, m: &CMat) -> CMat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] *= c(d[i] - d[j]);
        }
    }
    out
}

/// Anticommutator {diag(d), m}, elementwise (dᵢ + dⱼ)·mᵢⱼ.
pub fn diagonal_anticommutator(d: &DVector<f64>, m: &CMat) -> CMat {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[(i, j)] *= c(d[i] + d[j]);
        }
    }
    out
}

/// Trace distance (1/2)·Σ|eigᵢ(a − b)| between two Hermitian matrices.
pub fn trace_distance_matrices(a: &CMat, b: &CMat) -> f64 {
    let diff = a - b;
    0.5 * hermitian_eigenvalues(&diff).iter().map(|v| v.abs()).sum::<f64>()
}

/// Condition number and eigenvalue range of a symmetric real matrix.
pub fn symmetric_condition(m: &DMatrix<f64>) -> (f64, f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let cond = if min <= 0.0 { f64::INFINITY } else { max / min };
    (cond, min, max)
}
