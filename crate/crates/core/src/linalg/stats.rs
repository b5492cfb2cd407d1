use crate::batch::Embeddings;
use crate::error::Result;
use crate::linalg::{singular_values, DenseMatrix};
use crate::scalar::Scalar;

/// Unbiased batch covariance `C = 1/(n−1) Σ (z_i − z̄)(z_i − z̄)ᵀ`.
pub fn batch_covariance<T: Scalar>(z: &Embeddings<T>) -> Result<DenseMatrix<T>> {
    z.require_rows(2)?;
    let centered = z.values().centered();
    let d = z.d();
    let mut c = DenseMatrix::zeros(d, d);
    for i in 0..z.n() {
        let row = centered.row(i);
        for a in 0..d {
            let ra = row[a];
            for b in a..d {
                c[(a, b)] += ra * row[b];
            }
        }
    }
    let denom = T::from_count(z.n() - 1);
    for a in 0..d {
        for b in a..d {
            let v = c[(a, b)] / denom;
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    Ok(c)
}

/// Per-dimension variance with the same `1/(n−1)` normalization and the same
/// summation order as [`batch_covariance`], so the two agree bit-for-bit on the
/// diagonal.
pub fn batch_variance<T: Scalar>(z: &Embeddings<T>) -> Result<Vec<T>> {
    z.require_rows(2)?;
    let centered = z.values().centered();
    let mut var = vec![T::zero(); z.d()];
    for i in 0..z.n() {
        for (v, &x) in var.iter_mut().zip(centered.row(i)) {
            *v += x * x;
        }
    }
    let denom = T::from_count(z.n() - 1);
    var.iter_mut().for_each(|v| *v /= denom);
    Ok(var)
}

/// `exp` of the Shannon entropy of the normalized singular values of the
/// centered batch. A fully collapsed (constant) batch has effective rank 1.
pub fn effective_rank<T: Scalar>(z: &Embeddings<T>) -> Result<T> {
    z.require_rows(2)?;
    let sv = singular_values(&z.values().centered());
    Ok(entropy_rank(&sv, (z.n() - 1).min(z.d())))
}

/// Effective rank from an already computed singular spectrum.
pub(crate) fn entropy_rank<T: Scalar>(sv: &[T], cap: usize) -> T {
    let total: T = sv.iter().copied().sum();
    if total <= T::zero() || !total.is_finite() {
        return T::one();
    }
    let mut h = T::zero();
    for &s in sv {
        let p = s / total;
        if p > T::zero() {
            h -= p * p.ln();
        }
    }
    h.exp().max(T::one()).min(T::from_count(cap.max(1)))
}
