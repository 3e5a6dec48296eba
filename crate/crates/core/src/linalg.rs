//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const SVD_MAX_ITERS: usize = 10_000;

/// Thin SVD `m = U diag(sigma) Vt` with singular values in descending
/// order; ties keep their original order.
pub fn thin_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let svd = m
        .clone()
        .try_svd_unordered(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| {
            Error::NumericalBreakdown(format!("SVD of {}x{} matrix did not converge", m.nrows(), m.ncols()))
        })?;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    if sv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite singular value".into()));
    }
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    let sv = DVector::from_fn(order.len(), |i, _| sv[order[i]]);
    Ok((u, sv, vt))
}

/// Orthogonal Procrustes: the `Q` with orthonormal columns maximizing
/// `tr(Qᵀ m)`, i.e. the polar factor `U Vᵀ` of `m` (requires rows >= cols).
///
/// Uses one-sided Jacobi on the columns of `m`, which orthogonalizes them to
/// working precision relative to their own norms, so ill-conditioned inputs
/// still give orthonormal `U`. Directions with a (numerically) zero singular
/// value get an arbitrary orthonormal completion; every such choice attains
/// the same maximum.
pub fn procrustes(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    debug_assert!(rows >= cols);
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite Procrustes input".into()));
    }
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(cols, cols);
    let tol = (rows as f64).sqrt() * f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        // Columns at rounding level relative to the largest are left alone;
        // they are completed below.
        // Squared column norms, refreshed each sweep and updated in closed
        // form after every rotation.
        let mut sq: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
        let top = sq.iter().copied().fold(0.0, f64::max);
        let negligible = top * tol * tol;
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta) = (sq[p], sq[q]);
                let gamma = a.column(p).dot(&a.column(q));
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                sq[p] = alpha - t * gamma;
                sq[q] = beta + t * gamma;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let top = norms.iter().copied().fold(0.0, f64::max);
    let mut deficient = Vec::new();
    for (j, &n) in norms.iter().enumerate() {
        if n > top * 1e-13 && n > f64::MIN_POSITIVE {
            a.column_mut(j).unscale_mut(n);
        } else {
            deficient.push(j);
        }
    }
    if !deficient.is_empty() {
        let good: Vec<usize> = (0..cols).filter(|j| !deficient.contains(j)).collect();
        let basis = DMatrix::from_fn(rows, good.len(), |r, c| a[(r, good[c])]);
        let full = complete_orthonormal(&basis, cols);
        for (k, &j) in deficient.iter().enumerate() {
            a.set_column(j, &full.column(good.len() + k));
        }
    }
    Ok(a * v.transpose())
}

const JACOBI_MAX_SWEEPS: usize = 60;

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, p)], m[(r, q)]);
        m[(r, p)] = c * x - s * y;
        m[(r, q)] = s * x + c * y;
    }
}

/// Orthonormal basis for the columns of `m` (rows >= cols) via Householder
/// QR; rank-deficient inputs still yield orthonormal columns.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert!(m.nrows() >= m.ncols());
    m.clone().qr().q()
}

/// Extends the orthonormal columns of `q` to `cols` orthonormal columns by
/// Gram-Schmidt against the standard basis, taking the basis vector with
/// the largest residual each time.
pub fn complete_orthonormal(q: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    let n = q.nrows();
    assert!(cols <= n, "cannot fit {cols} orthonormal columns in dimension {n}");
    let mut basis: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    while basis.len() < cols {
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = -1.0;
        for e in 0..n {
            let mut v = DVector::zeros(n);
            v[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&v);
                    v.axpy(-proj, b, 1.0);
                }
            }
            let nv = v.norm();
            if nv > best_norm {
                best_norm = nv;
                best = Some(v);
            }
        }
        let v = best.expect("n > 0");
        basis.push(v / best_norm);
    }
    DMatrix::from_columns(&basis)
}

/// `rhs * gram^+` for a symmetric positive semi-definite `gram`, via its
/// eigen-decomposition with a tiny relative cutoff.
pub fn solve_gram(rhs: &DMatrix<f64>, gram: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = max * 1e-14;
    let inv_vals = eig
        .eigenvalues
        .map(|l| if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 });
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    rhs * pinv
}

/// Appends zero rows so `m` has at least `rows` rows.
pub fn pad_rows(m: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    if m.nrows() >= rows {
        return m.clone();
    }
    let mut out = DMatrix::zeros(rows, m.ncols());
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// `max |a_ij - I_ij|` for `a = q^T q`.
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let mut worst = 0.0f64;
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((g[(r, c)] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        let (u, s, vt) = thin_svd(&m).unwrap();
        assert!(s[0] >= s[1]);
        let back = &u * DMatrix::from_diagonal(&s) * &vt;
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn svd_identity_keeps_basis_order() {
        let (_, _, vt) = thin_svd(&DMatrix::identity(3, 3)).unwrap();
        for i in 0..3 {
            assert!((vt[(i, i)].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn completion_is_orthonormal() {
        let q = orthonormalize(&DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]));
        let full = complete_orthonormal(&q, 4);
        assert!(orthonormality_error(&full) < 1e-14);
        assert!((full.column(0) - q.column(0)).norm() < 1e-15);
    }

    #[test]
    fn procrustes_orthonormal() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = procrustes(&m).unwrap();
        assert!(orthonormality_error(&q) < 1e-14);
    }

    #[test]
    fn gram_solve_matches_inverse() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let rhs = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let x = solve_gram(&rhs, &g);
        assert!((x * &g - rhs).abs().max() < 1e-12);
    }
}
