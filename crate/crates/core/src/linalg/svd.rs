use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

/// Singular values of `m`, descending, by one-sided (Hestenes) Jacobi.
///
/// Columns of the tall orientation are pairwise orthogonalized by plane
/// rotations; their final norms are the singular values. This never forms
/// `mᵀm`, so small singular values keep full relative accuracy.
pub fn singular_values<T: Scalar>(m: &DenseMatrix<T>) -> Vec<T> {
    let tall = if m.rows() >= m.cols() { m.transpose() } else { m.clone() };
    // `tall` is now (k x len) with one column of the tall matrix per row.
    let k = tall.rows();
    let len = tall.cols();
    let mut cols: Vec<Vec<T>> = (0..k).map(|i| tall.row(i).to_vec()).collect();
    let eps = T::epsilon() * T::from_count(len.max(1)).sqrt();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = T::zero();
                    let mut b = T::zero();
                    let mut g = T::zero();
                    for (&x, &y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = {
                    let t = T::one() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                    if zeta < T::zero() {
                        -t
                    } else {
                        t
                    }
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<T> = cols.iter().map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}
