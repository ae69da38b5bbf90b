//! Dense helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Thin SVD `m ≈ U diag(σ) Vᵀ` over the singular values above `tol`, in
/// decreasing order.
///
/// Read off the symmetric eigenproblem of `[0 M; Mᵀ 0]`, whose eigenpairs
/// are `(±σ, (u, ±v)/√2)`. Values below `1e-13 ‖M‖` are always dropped.
pub fn thin_svd(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let mut jw = DMatrix::zeros(r + c, r + c);
    jw.view_mut((0, r), (r, c)).copy_from(m);
    jw.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = SymmetricEigen::new(jw);
    let floor = tol.max(1e-13 * m.norm());
    let mut keep: Vec<usize> = (0..r + c).filter(|&k| eig.eigenvalues[k] > floor).collect();
    keep.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    keep.truncate(r.min(c));
    let s = DVector::from_fn(keep.len(), |k, _| eig.eigenvalues[keep[k]]);
    let mut u = DMatrix::from_fn(r, keep.len(), |i, k| eig.eigenvectors[(i, keep[k])]);
    let mut v = DMatrix::from_fn(c, keep.len(), |i, k| eig.eigenvectors[(r + i, keep[k])]);
    for mut col in u.column_iter_mut().chain(v.column_iter_mut()) {
        let n = col.norm();
        col /= n;
    }
    (u, s, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one() {
        let u = DVector::from_vec(vec![3.0, 4.0]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let (uu, s, vv) = thin_svd(&(&u * v.transpose()), 0.0);
        assert_eq!(s.len(), 1);
        assert!((s[0] - 5.0).abs() < 1e-14);
        assert!((&uu * vv.transpose() * 5.0 - &u * v.transpose()).amax() < 1e-14);
    }
}
