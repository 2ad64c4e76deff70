//! Small dense linear-algebra helpers.
//!
//! The per-observation kernels work on flat `d×d` buffers to avoid
//! allocation in the inner loop. Every matrix passed to the slice routines
//! is symmetric, so row- and column-major layouts coincide.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// In-place lower Cholesky factor of the symmetric matrix `a` (`d×d`,
/// row-major). The strict upper triangle of `l` is zeroed. Returns `false`
/// when `a` is not numerically positive-definite.
pub fn cholesky(a: &[f64], d: usize, l: &mut [f64]) -> bool {
    debug_assert!(a.len() >= d * d && l.len() >= d * d);
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return false;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
        for j in (i + 1)..d {
            l[i * d + j] = 0.0;
        }
    }
    true
}

/// `log|A|` from the Cholesky factor of `A`.
pub fn chol_log_det(l: &[f64], d: usize) -> f64 {
    2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>()
}

/// Inverse of `A = LLᵀ` written to `out`; `work` needs `d×d` entries.
pub fn chol_inverse(l: &[f64], d: usize, out: &mut [f64], work: &mut [f64]) {
    // work <- L⁻¹ (lower triangular)
    for j in 0..d {
        for i in 0..d {
            work[i * d + j] = 0.0;
        }
        work[j * d + j] = 1.0 / l[j * d + j];
        for i in (j + 1)..d {
            let mut sum = 0.0;
            for k in j..i {
                sum -= l[i * d + k] * work[k * d + j];
            }
            work[i * d + j] = sum / l[i * d + i];
        }
    }
    // out <- L⁻ᵀ L⁻¹
    for i in 0..d {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i..d {
                sum += work[k * d + i] * work[k * d + j];
            }
            out[i * d + j] = sum;
            out[j * d + i] = sum;
        }
    }
}

/// `xᵀ A y` for a row-major `d×d` matrix.
pub fn bilinear(a: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * y[j];
        }
        total += x[i] * acc;
    }
    total
}

/// `out = A x`.
pub fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `tr(AB)` for symmetric `A`, `B` of the same size.
pub fn trace_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse_log_det(m: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite(what))?;
    let l = chol.l_dirty();
    let log_det = 2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    if !log_det.is_finite() {
        return Err(Error::NotPositiveDefinite(what));
    }
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok((inv, log_det))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    spd_inverse_log_det(m, what).map(|(inv, _)| inv)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (columns of the returned matrix follow the same order).
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // fix the sign so the largest-magnitude entry is positive
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Maximum absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
