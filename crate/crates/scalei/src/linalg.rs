//! Thin SVD-based helpers shared by the recovery pipeline and the metrics.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Numerical rank at a relative tolerance: count of singular values above
/// `rel_tol * sigma_max`. An all-but-zero matrix has rank 0.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    match sv.first() {
        Some(&smax) if smax > f64::MIN_POSITIVE => {
            sv.iter().filter(|&&s| s > rel_tol * smax).count()
        }
        _ => 0,
    }
}

/// Descending singular values of `m` together with a *complete* orthonormal
/// set of right singular vectors, one per column of `m`.
///
/// The decomposition of a wide, nearly rank-deficient matrix can return right
/// singular vectors that are rotated within the small-singular-value block, so
/// a wide input is zero-padded to square first: the extra zero rows leave the
/// singular values and right vectors unchanged while making the computed set
/// both complete and accurate.
fn full_right_vectors(m: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.ncols();
    let svd = if m.nrows() >= n {
        m.clone().svd(false, true)
    } else {
        let mut padded = DMatrix::zeros(n, n);
        padded.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        padded.svd(false, true)
    };
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut pairs: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .zip(0..v_t.nrows())
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let sv = pairs.iter().map(|p| p.0).collect();
    let vectors = pairs
        .iter()
        .map(|&(_, i)| (0..n).map(|j| v_t[(i, j)]).collect())
        .collect();
    (sv, vectors)
}

/// Orthonormal basis (as columns) of the span of the *rows* of `m`, truncated
/// at `rel_tol` relative to the largest singular value. Returns the basis and
/// the descending singular values. A numerically zero input yields an empty
/// basis.
pub fn row_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let dim = m.ncols();
    let (sv, vectors) = full_right_vectors(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let r = if smax > f64::MIN_POSITIVE {
        sv.iter().filter(|&&s| s > rel_tol * smax).count()
    } else {
        0
    };
    let mut basis = DMatrix::zeros(dim, r);
    for (col, v) in vectors.iter().take(r).enumerate() {
        for j in 0..dim {
            basis[(j, col)] = v[j];
        }
    }
    (basis, sv)
}

/// Orthonormal basis of the joint column span of the given bases.
pub fn union_basis(bases: &[&DMatrix<f64>], rel_tol: f64) -> DMatrix<f64> {
    let dim = bases.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let total: usize = bases.iter().map(|b| b.ncols()).sum();
    let mut stacked = DMatrix::zeros(total, dim);
    let mut row = 0;
    for b in bases {
        for c in 0..b.ncols() {
            for r in 0..b.nrows() {
                stacked[(row, r)] = b[(r, c)];
            }
            row += 1;
        }
    }
    row_space_basis(&stacked, rel_tol).0
}

/// Orthonormal basis of `{c : M c = 0}` at a relative tolerance. For a matrix
/// with fewer rows than columns the nullspace is never empty.
pub fn nullspace(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let (sv, vectors) = full_right_vectors(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let r = if smax > f64::MIN_POSITIVE {
        sv.iter().filter(|&&s| s > rel_tol * smax).count()
    } else {
        0
    };
    // The complete right-vector set always has n entries, so the trailing
    // n - r vectors are exactly the nullspace basis — including the
    // coordinates a wide matrix's thin decomposition would not cover.
    let mut out = DMatrix::zeros(n, n - r);
    for (k, v) in vectors.iter().skip(r).enumerate() {
        for j in 0..n {
            out[(j, k)] = v[j];
        }
    }
    out
}

/// Moore–Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let smax = svd
        .singular_values
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    if smax <= f64::MIN_POSITIVE {
        return Err(Error::Domain("pseudo-inverse of a zero matrix".into()));
    }
    svd.pseudo_inverse(rel_tol * smax)
        .map_err(|e| Error::Domain(format!("pseudo-inverse failed: {e}")))
}

/// Condition number `sigma_max / sigma_min` over the first `min(nrows, ncols)`
/// singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = singular_values(m);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > f64::MIN_POSITIVE => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Least-squares solution `B` of `A B = Y` (minimizing the Frobenius
/// residual), via SVD.
pub fn lstsq(a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "lstsq: {} rows vs {}",
            a.nrows(),
            y.nrows()
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd
        .singular_values
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    if smax <= f64::MIN_POSITIVE {
        return Err(Error::Domain("lstsq with zero design matrix".into()));
    }
    svd.solve(y, 1e-12 * smax)
        .map_err(|e| Error::Domain(format!("lstsq failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_of_outer_product_is_one() {
        let u = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let v = DMatrix::from_row_slice(1, 4, &[0.5, 1.0, 2.0, 3.0]);
        let m = &u * &v;
        assert_eq!(rank(&m, 1e-10), 1);
    }

    #[test]
    fn row_space_basis_spans_rows() {
        let m = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 0.0, 2.0]);
        let (basis, _) = row_space_basis(&m, 1e-10);
        assert_eq!(basis.ncols(), 2);
        // Every row must be reproduced by its projection onto the basis.
        for i in 0..m.nrows() {
            let row = m.row(i).transpose();
            let proj = &basis * (basis.transpose() * &row);
            assert_abs_diff_eq!((row - proj).norm(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn nullspace_annihilates() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, -1.0]);
        let ns = nullspace(&m, 1e-10);
        assert_eq!(ns.ncols(), 2);
        let prod = &m * &ns;
        assert_abs_diff_eq!(prod.norm(), 0.0, epsilon = 1e-10);
        // Basis columns are orthonormal.
        let gram = ns.transpose() * &ns;
        assert_abs_diff_eq!((gram - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn nullspace_of_empty_constraint_is_identity() {
        let m = DMatrix::<f64>::zeros(0, 3);
        let ns = nullspace(&m, 1e-10);
        assert_eq!(ns.ncols(), 3);
    }

    #[test]
    fn pinv_left_inverse_of_tall() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let p = pinv(&m, 1e-12).unwrap();
        let eye = &p * &m;
        assert_abs_diff_eq!((eye - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn condition_number_of_orthogonal_is_one() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_abs_diff_eq!(condition_number(&m), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lstsq_recovers_exact_map() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let b_true = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, -2.0, 0.5]);
        let y = &a * &b_true;
        let b = lstsq(&a, &y).unwrap();
        assert_abs_diff_eq!((b - b_true).norm(), 0.0, epsilon = 1e-9);
    }
}
