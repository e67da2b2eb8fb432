//! Small dense-matrix helpers used throughout the crate.

use nalgebra::{DMatrix, DVector};

/// Max-norm of the entrywise difference between two matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Max-norm of `Q^T Q - I`.
pub fn orthogonality_residual(q: &DMatrix<f64>) -> f64 {
    let gram = q.transpose() * q;
    let id = DMatrix::identity(gram.nrows(), gram.ncols());
    max_abs_diff(&gram, &id)
}

/// Stacks blocks vertically. All blocks must have the same column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut row = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), cols);
        out.view_mut((row, 0), (b.nrows(), cols)).copy_from(*b);
        row += b.nrows();
    }
    out
}

/// `diag(d) * m` computed as a row scaling.
pub fn scale_rows(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(d.len(), m.nrows());
    let mut out = m.clone();
    for (i, di) in d.iter().enumerate() {
        out.row_mut(i).scale_mut(*di);
    }
    out
}

/// `q * diag(d) * q^T` without forming intermediate diagonals.
pub fn quad_diag(q: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let scaled = scale_columns(q, d);
    scaled * q.transpose()
}

/// `m * diag(d)` computed as a column scaling.
pub fn scale_columns(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    debug_assert_eq!(d.len(), m.ncols());
    let mut out = m.clone();
    for (j, dj) in d.iter().enumerate() {
        out.column_mut(j).scale_mut(*dj);
    }
    out
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Extends a matrix with orthonormal columns to a full orthonormal basis.
///
/// Greedily picks the standard basis vector with the largest residual after
/// projecting out the current columns, re-orthogonalizing twice for stability.
pub fn complete_orthonormal_basis(u: &DMatrix<f64>) -> DMatrix<f64> {
    let (dim, have) = u.shape();
    debug_assert!(have <= dim);
    let mut w = DMatrix::zeros(dim, dim);
    w.view_mut((0, 0), (dim, have)).copy_from(u);
    let mut filled = have;
    while filled < dim {
        let mut best: Option<(DVector<f64>, f64)> = None;
        for j in 0..dim {
            let mut v = DVector::zeros(dim);
            v[j] = 1.0;
            for _ in 0..2 {
                for c in 0..filled {
                    let col = w.column(c);
                    let dot = col.dot(&v);
                    v.axpy(-dot, &col.clone_owned(), 1.0);
                }
            }
            let norm = v.norm();
            if best.as_ref().is_none_or(|(_, n)| norm > *n) {
                best = Some((v, norm));
            }
        }
        let (mut v, norm) = best.expect("dim > 0");
        debug_assert!(norm > 1e-8, "orthonormal completion degenerate");
        v /= norm;
        w.set_column(filled, &v);
        filled += 1;
    }
    w
}
