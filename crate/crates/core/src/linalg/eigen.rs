use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// Largest matrix order the Jacobi solver accepts.
pub const MAX_EIGEN_DIM: usize = 512;
pub const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a real symmetric matrix.
///
/// Columns of `basis` are orthonormal eigenvectors; `eigenvalues` are sorted in
/// descending order and column `k` pairs with `eigenvalues[k]`. Each column is
/// signed so that its largest-magnitude component is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition<T> {
    pub basis: DenseMatrix<T>,
    pub eigenvalues: Vec<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    /// `U · diag(values) · Uᵀ` for arbitrary replacement eigenvalues.
    pub fn recompose_with(&self, values: &[T]) -> DenseMatrix<T> {
        let n = self.basis.rows();
        let u = &self.basis;
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = T::zero();
                for (k, &lam) in values.iter().enumerate() {
                    acc += u[(i, k)] * lam * u[(j, k)];
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> DenseMatrix<T> {
        self.recompose_with(&self.eigenvalues)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over every `(p, q)` pair until the off-diagonal Frobenius norm falls
/// below `T::jacobi_tolerance()` relative to the matrix norm, up to
/// [`MAX_SWEEPS`] sweeps. `tol` bounds the accepted asymmetry `|a_ij − a_ji|`;
/// the solver works on the symmetrized copy `(A + Aᵀ)/2`.
pub fn symmetric_eigendecompose<T: Scalar>(a: &DenseMatrix<T>, tol: T) -> Result<EigenDecomposition<T>> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows > MAX_EIGEN_DIM {
        return Err(Error::DimensionTooLarge { dim: rows, max: MAX_EIGEN_DIM });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigendecomposition input"));
    }
    let asym = a.asymmetry();
    if asym > tol {
        return Err(Error::NonSymmetric { asymmetry: asym.to_f64_lossy(), tol: tol.to_f64_lossy() });
    }

    let n = rows;
    let half = T::lit(0.5);
    let mut w = DenseMatrix::from_fn(n, n, |i, j| half * (a[(i, j)] + a[(j, i)]));
    let mut v = DenseMatrix::<T>::identity(n);
    let norm = w.frobenius_norm();
    let target = T::jacobi_tolerance() * norm;

    let mut converged = norm == T::zero();
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        if off_diagonal_norm(&w) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut w, &mut v, p, q);
            }
        }
    }
    if !converged {
        let residual = off_diagonal_norm(&w);
        if residual > target {
            return Err(Error::NotConverged {
                sweeps: MAX_SWEEPS,
                residual: (residual / norm).to_f64_lossy(),
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(j, j)].partial_cmp(&w[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));

    let eigenvalues = order.iter().map(|&k| w[(k, k)]).collect();
    let mut basis = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<T> = (0..n).map(|i| v[(i, src)]).collect();
        canonical_sign(&mut col);
        for (i, x) in col.into_iter().enumerate() {
            basis[(i, dst)] = x;
        }
    }
    Ok(EigenDecomposition { basis, eigenvalues })
}

fn off_diagonal_norm<T: Scalar>(w: &DenseMatrix<T>) -> T {
    let n = w.rows();
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += w[(i, j)] * w[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation annihilating `w[p][q]`.
fn rotate<T: Scalar>(w: &mut DenseMatrix<T>, v: &mut DenseMatrix<T>, p: usize, q: usize) {
    let apq = w[(p, q)];
    if apq == T::zero() {
        return;
    }
    let app = w[(p, p)];
    let aqq = w[(q, q)];
    let theta = (aqq - app) / (T::lit(2.0) * apq);
    let t = if theta.abs() > T::lit(1e150) {
        T::one() / (T::lit(2.0) * theta)
    } else {
        let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -t
        } else {
            t
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    w[(p, p)] = app - t * apq;
    w[(q, q)] = aqq + t * apq;
    w[(p, q)] = T::zero();
    w[(q, p)] = T::zero();
    let n = w.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = w[(k, p)];
        let akq = w[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        w[(k, p)] = new_kp;
        w[(p, k)] = new_kp;
        w[(k, q)] = new_kq;
        w[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Flips `col` so its largest-magnitude entry (first on ties) is positive.
pub(crate) fn canonical_sign<T: Scalar>(col: &mut [T]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&x| x < T::zero()) {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random_range(-1.0..1.0);
                a[(i, j)] = x;
                a[(j, i)] = x;
            }
        }
        a
    }

    fn orthonormality_error(u: &DenseMatrix<f64>) -> f64 {
        let utu = u.t_matmul(u).unwrap();
        utu.sub(&DenseMatrix::identity(u.cols())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let e = symmetric_eigendecompose(&DenseMatrix::<f64>::identity(3), 1e-12).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(orthonormality_error(&e.basis) < 1e-15);
    }

    #[test]
    fn two_by_two_by_hand() {
        // det([[2-x,1],[1,2-x]]) = (2-x)^2 - 1 = 0  =>  x = 3, 1
        let a = DenseMatrix::from_rows(&[vec![2.0f64, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigendecompose(&a, 1e-12).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.basis[(0, 0)] - r).abs() < 1e-14 && (e.basis[(1, 0)] - r).abs() < 1e-14);
        // second vector ±(1,-1)/√2; the first component wins the tie and is positive.
        assert!((e.basis[(0, 1)] - r).abs() < 1e-14 && (e.basis[(1, 1)] + r).abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_symmetric(8, &mut rng);
        let e = symmetric_eigendecompose(&a, 1e-12).unwrap();
        let rel = e.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-10, "relative reconstruction error {rel:e}");
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn orthonormal_and_reconstructs_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for trial in 0..1000 {
            let n = 1 + trial % 64;
            let a = random_symmetric(n, &mut rng);
            let e = symmetric_eigendecompose(&a, 1e-12).unwrap();
            assert!(orthonormality_error(&e.basis) < 1e-10, "trial {trial}");
            let rel = e.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-8, "trial {trial}: {rel:e}");
        }
    }

    #[test]
    fn error_paths() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.5, 1.0]]).unwrap();
        assert!(matches!(symmetric_eigendecompose(&a, 1e-3), Err(Error::NonSymmetric { .. })));
        assert!(symmetric_eigendecompose(&a, 1.0).is_ok());
        let r = DenseMatrix::<f64>::zeros(2, 3);
        assert!(matches!(symmetric_eigendecompose(&r, 1e-3), Err(Error::NotSquare { .. })));
        let big = DenseMatrix::<f64>::zeros(513, 513);
        assert!(matches!(symmetric_eigendecompose(&big, 1e-3), Err(Error::DimensionTooLarge { .. })));
    }

    #[test]
    fn single_precision_path() {
        let a = DenseMatrix::from_rows(&[vec![2.0f32, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigendecompose(&a, 1e-6).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-5);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-5);
    }
}
