//! Small dense linear-algebra helpers shared by the spectral, MACE, MH and
//! complexity modules.

use nalgebra::{DMatrix, DVector};

/// Symmetric eigendecomposition with eigenvalues sorted descending and each
/// eigenvector sign-normalized (see [`fix_sign`]).
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    // symmetrize away rounding asymmetry before handing to the solver
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        fix_sign(col.as_mut_slice());
        vectors.set_column(c, &col);
    }
    (values, vectors)
}

/// Flip `v` so that its entry of largest magnitude is positive. Entries within
/// 1e-12 (relative) of the maximum tie, and the lowest index wins.
pub fn fix_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let tol = 1e-12 * max.max(1.0);
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max - tol)
        .expect("max is attained");
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Orthonormal basis for the column span of `a`, dropping directions whose
/// singular value is below `rel_tol` times the largest.
pub fn orthonormal_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if a.ncols() == 0 || a.nrows() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * smax)
        .collect();
    DMatrix::from_fn(a.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Orthogonal projector onto the column span of `a`.
pub fn projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = orthonormal_basis(a, 1e-10);
    &q * q.transpose()
}

/// Frobenius distance between the projectors onto the column spans of `a` and `b`.
pub fn projector_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (projector(a) - projector(b)).norm()
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// (rounding noise) are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(a);
    let s = DVector::from_iterator(vals.len(), vals.iter().map(|&l| l.max(0.0).sqrt()));
    &vecs * DMatrix::from_diagonal(&s) * vecs.transpose()
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen_desc(a);
    vals.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_desc(a);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Replace the eigenvectors in `basis` (an orthonormal basis of an invariant
/// subspace) so that the span of `target` comes first or last.
///
/// `target` is projected into the span of `basis` and orthonormalized; the
/// remaining columns are its orthogonal complement inside that span.
pub(crate) fn rotate_into(basis: &DMatrix<f64>, target: &DMatrix<f64>, target_last: bool) -> DMatrix<f64> {
    let c = basis.ncols();
    let coords = basis.transpose() * target;
    let t = orthonormal_basis(&coords, 1e-8);
    let tdim = t.ncols();
    // complement of span(t) within R^c
    let full = {
        let mut m = DMatrix::zeros(c, tdim + c);
        m.view_mut((0, 0), (c, tdim)).copy_from(&t);
        m.view_mut((0, tdim), (c, c)).copy_from(&DMatrix::identity(c, c));
        m
    };
    let mut cols: Vec<DVector<f64>> = (0..tdim).map(|i| t.column(i).into_owned()).collect();
    for j in tdim..tdim + c {
        if cols.len() == c {
            break;
        }
        let mut v = full.column(j).into_owned();
        for _ in 0..2 {
            for q in &cols {
                let dot = q.dot(&v);
                v -= q * dot;
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            cols.push(v / n);
        }
    }
    let (head, tail) = cols.split_at(tdim);
    let ordered: Vec<&DVector<f64>> = if target_last {
        tail.iter().chain(head.iter()).collect()
    } else {
        head.iter().chain(tail.iter()).collect()
    };
    let mut out = DMatrix::zeros(basis.nrows(), c);
    for (k, v) in ordered.into_iter().enumerate() {
        let mut col = basis * v;
        fix_sign(col.as_mut_slice());
        out.set_column(k, &col);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_sorted_and_signed() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0]);
        let (vals, vecs) = sym_eigen_desc(&a);
        assert_relative_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-12);
        assert_relative_eq!(vals[2], 1.0, epsilon = 1e-12);
        // [1,1,0]/sqrt2 tie: first index positive
        assert!(vecs[(0, 1)] > 0.0);
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - a).norm() < 1e-12);
    }

    #[test]
    fn fix_sign_tie_goes_to_lowest_index() {
        let mut v = [0.5, -0.5, 0.1];
        fix_sign(&mut v);
        assert_eq!(v, [0.5, -0.5, 0.1]);
        let mut w = [-0.5, 0.5];
        fix_sign(&mut w);
        assert_eq!(w, [0.5, -0.5]);
    }

    #[test]
    fn projector_distance_basis_invariant() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -2.0, 0.0, 0.0]);
        assert!(projector_distance(&a, &b) < 1e-12);
        let c = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
        assert_relative_eq!(projector_distance(&a.columns(0, 1).into_owned(), &c), 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = psd_sqrt(&a);
        assert!((&s * &s - a).norm() < 1e-12);
    }

    #[test]
    fn rotate_into_places_target() {
        let basis = DMatrix::<f64>::identity(3, 3);
        let target = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let r = rotate_into(&basis, &target, true);
        let last = r.column(2).into_owned();
        assert_relative_eq!(last[0].abs(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert!((r.transpose() * &r - DMatrix::identity(3, 3)).norm() < 1e-12);
    }
}
