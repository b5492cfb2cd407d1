//! Variance, invariance and covariance regularizers with analytic gradients,
//! their weighted composition, and the cross-block application over target
//! blocks.

use serde::{Deserialize, Serialize};

use crate::batch::Embeddings;
use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{batch_covariance, batch_variance, DenseMatrix};
use crate::scalar::Scalar;

/// Weights and constants of the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct VicRegCoefficients<T> {
    pub beta_sim: T,
    pub beta_std: T,
    pub beta_cov: T,
    /// Weight of the whole regularizer next to the prediction loss.
    pub beta_vicreg: T,
    /// Target standard deviation of the hinge.
    pub gamma: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for VicRegCoefficients<T> {
    fn default() -> Self {
        Self {
            beta_sim: T::lit(25.0),
            beta_std: T::lit(25.0),
            beta_cov: T::lit(1.0),
            beta_vicreg: T::lit(0.001),
            gamma: T::lit(1.0),
            epsilon: T::lit(1e-4),
        }
    }
}

impl<T: Scalar> VicRegCoefficients<T> {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.beta_sim, self.beta_std, self.beta_cov, self.beta_vicreg];
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::InvalidConfig("VICReg weights must be finite and >= 0".into()));
        }
        if !(self.epsilon > T::zero()) || !(self.gamma > T::zero()) {
            return Err(Error::InvalidConfig("VICReg gamma and epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// A scalar loss together with its gradient for each input, in argument order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad<T> {
    pub value: T,
    pub grads: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> LossWithGrad<T> {
    pub fn grad(&self) -> &DenseMatrix<T> {
        &self.grads[0]
    }
}

/// `v(z) = 1/d Σ_j max(0, γ − √(Var z_j + ε))`.
///
/// The gradient is zero on dimensions where the hinge is inactive, including
/// the boundary `√(Var + ε) = γ`.
pub fn variance_term<T: Scalar>(z: &Embeddings<T>, gamma: T, epsilon: T) -> Result<LossWithGrad<T>> {
    let var = batch_variance(z)?;
    let (n, d) = (z.n(), z.d());
    let dn = T::from_count(d);
    let std: Vec<T> = var.iter().map(|&v| (v + epsilon).sqrt()).collect();
    let mut value = T::zero();
    for &s in &std {
        value += (gamma - s).max(T::zero());
    }
    value /= dn;

    let centered = z.values().centered();
    let mut grad = DenseMatrix::zeros(n, d);
    let nm1 = T::from_count(n - 1);
    for j in 0..d {
        if gamma - std[j] <= T::zero() {
            continue;
        }
        let k = -T::one() / (dn * std[j] * nm1);
        for i in 0..n {
            grad[(i, j)] = k * centered[(i, j)];
        }
    }
    Ok(LossWithGrad { value, grads: vec![grad] })
}

/// `c(z) = 1/d Σ_{i≠j} C_ij²` with `C` the unbiased batch covariance.
///
/// For `d < 2` there are no off-diagonal entries and the term is 0.
pub fn covariance_term<T: Scalar>(z: &Embeddings<T>) -> Result<LossWithGrad<T>> {
    z.require_rows(2)?;
    let (n, d) = (z.n(), z.d());
    if d < 2 {
        return Ok(LossWithGrad { value: T::zero(), grads: vec![DenseMatrix::zeros(n, d)] });
    }
    let mut c = batch_covariance(z)?;
    for j in 0..d {
        c[(j, j)] = T::zero();
    }
    let dn = T::from_count(d);
    let value = c.as_slice().iter().map(|&x| x * x).sum::<T>() / dn;
    // ∂c/∂Z = 4/(d(n−1)) · Z_centered · C_offdiag
    let mut grad = z.values().centered().matmul(&c)?;
    let k = T::lit(4.0) / (dn * T::from_count(n - 1));
    grad.as_mut_slice().iter_mut().for_each(|g| *g *= k);
    Ok(LossWithGrad { value, grads: vec![grad] })
}

/// Mean squared distance between paired rows, `1/n Σ_i ‖a_i − b_i‖²`.
/// Gradients are returned for `a` then `b`.
pub fn invariance_term<T: Scalar>(a: &Embeddings<T>, b: &Embeddings<T>) -> Result<LossWithGrad<T>> {
    if a.values().shape() != b.values().shape() {
        return Err(shape_mismatch(
            format!("{}x{}", a.n(), a.d()),
            format!("{}x{}", b.n(), b.d()),
        ));
    }
    if a.n() == 0 {
        return Err(Error::BatchTooSmall { n: 0, min: 1 });
    }
    let diff = a.values().sub(b.values())?;
    let nn = T::from_count(a.n());
    let value = diff.as_slice().iter().map(|&x| x * x).sum::<T>() / nn;
    let ga = diff.scale(T::lit(2.0) / nn);
    let gb = ga.scale(-T::one());
    Ok(LossWithGrad { value, grads: vec![ga, gb] })
}

/// Weighted regularizer for one pair of branches, with its unweighted parts.
#[derive(Debug, Clone, PartialEq)]
pub struct VicRegLoss<T> {
    pub total: LossWithGrad<T>,
    pub sim: T,
    /// Mean of the variance term over both branches.
    pub std: T,
    /// Mean of the covariance term over both branches.
    pub cov: T,
}

/// `β_sim·inv(a,b) + β_std·(v(a)+v(b))/2 + β_cov·(c(a)+c(b))/2`.
pub fn vicreg_loss<T: Scalar>(
    a: &Embeddings<T>,
    b: &Embeddings<T>,
    coeffs: &VicRegCoefficients<T>,
) -> Result<VicRegLoss<T>> {
    let inv = invariance_term(a, b)?;
    let va = variance_term(a, coeffs.gamma, coeffs.epsilon)?;
    let vb = variance_term(b, coeffs.gamma, coeffs.epsilon)?;
    let ca = covariance_term(a)?;
    let cb = covariance_term(b)?;

    let half = T::lit(0.5);
    let sim = inv.value;
    let std = half * (va.value + vb.value);
    let cov = half * (ca.value + cb.value);
    let value = coeffs.beta_sim * sim + coeffs.beta_std * std + coeffs.beta_cov * cov;

    let mut ga = inv.grads[0].scale(coeffs.beta_sim);
    ga.add_scaled(&va.grads[0], half * coeffs.beta_std)?;
    ga.add_scaled(&ca.grads[0], half * coeffs.beta_cov)?;
    let mut gb = inv.grads[1].scale(coeffs.beta_sim);
    gb.add_scaled(&vb.grads[0], half * coeffs.beta_std)?;
    gb.add_scaled(&cb.grads[0], half * coeffs.beta_cov)?;

    Ok(VicRegLoss { total: LossWithGrad { value, grads: vec![ga, gb] }, sim, std, cov })
}

/// A differentiable map applied to pooled block embeddings before the
/// regularizer. `backprop` adds parameter gradients into `grad` and returns the
/// gradient with respect to the input.
pub trait Projector<T: Scalar> {
    type Cache;
    type Grad;

    fn project(&self, x: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, Self::Cache)>;

    fn backprop(
        &self,
        cache: &Self::Cache,
        grad_out: &DenseMatrix<T>,
        grad: &mut Self::Grad,
    ) -> Result<DenseMatrix<T>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProjector;

impl<T: Scalar> Projector<T> for IdentityProjector {
    type Cache = ();
    type Grad = ();

    fn project(&self, x: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, ())> {
        Ok((x.clone(), ()))
    }

    fn backprop(&self, _: &(), grad_out: &DenseMatrix<T>, _: &mut ()) -> Result<DenseMatrix<T>> {
        Ok(grad_out.clone())
    }
}

/// Per-block patch embeddings `[batch, block, patch, d]`.
///
/// Block `i` is stored as a `(batch · patches_i) × d` matrix, image-major:
/// row `b · patches_i + p` holds patch `p` of image `b`. Blocks may have
/// different patch counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEmbeddings<T> {
    pub batch: usize,
    pub blocks: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> BlockEmbeddings<T> {
    pub fn new(batch: usize, blocks: Vec<DenseMatrix<T>>) -> Result<Self> {
        let d = blocks.first().map_or(0, DenseMatrix::cols);
        for blk in &blocks {
            if batch == 0 || blk.rows() % batch != 0 || blk.rows() == 0 || blk.cols() != d {
                return Err(shape_mismatch(
                    format!("(batch {batch} x patches) x {d}"),
                    format!("{}x{}", blk.rows(), blk.cols()),
                ));
            }
            if !blk.is_finite() {
                return Err(Error::NonFinite("block embeddings"));
            }
        }
        Ok(Self { batch, blocks })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, DenseMatrix::cols)
    }

    pub fn patches(&self, block: usize) -> usize {
        self.blocks[block].rows() / self.batch
    }

    /// Mean over the patch axis of one block: `batch × d`.
    pub fn pooled(&self, block: usize) -> DenseMatrix<T> {
        let p = self.patches(block);
        let src = &self.blocks[block];
        let d = src.cols();
        let mut out = DenseMatrix::zeros(self.batch, d);
        let inv = T::one() / T::from_count(p);
        for b in 0..self.batch {
            let dst = out.row_mut(b);
            for r in 0..p {
                for (o, &x) in dst.iter_mut().zip(src.row(b * p + r)) {
                    *o += x;
                }
            }
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            batch: self.batch,
            blocks: self.blocks.iter().map(|b| DenseMatrix::zeros(b.rows(), b.cols())).collect(),
        }
    }
}

/// Result of [`cross_block_vicreg`]: value, gradient with respect to every
/// block embedding, and pair-averaged unweighted parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlockLoss<T> {
    pub value: T,
    pub grad: BlockEmbeddings<T>,
    pub sim: T,
    pub std: T,
    pub cov: T,
}

/// Regularizer applied across target blocks.
///
/// Pools each block over its patches, projects it, accumulates
/// [`vicreg_loss`] over every ordered pair `i ≠ j` and divides by
/// `M·(M−1)`. Projector parameter gradients are added into `proj_grad`.
pub fn cross_block_vicreg<T: Scalar, P: Projector<T>>(
    zc: &BlockEmbeddings<T>,
    projector: &P,
    coeffs: &VicRegCoefficients<T>,
    proj_grad: &mut P::Grad,
) -> Result<CrossBlockLoss<T>> {
    cross_block_vicreg_scaled(zc, projector, coeffs, T::one(), proj_grad)
}

/// [`cross_block_vicreg`] with every gradient (block and projector) multiplied
/// by `grad_scale`; the returned value and parts are unscaled.
pub fn cross_block_vicreg_scaled<T: Scalar, P: Projector<T>>(
    zc: &BlockEmbeddings<T>,
    projector: &P,
    coeffs: &VicRegCoefficients<T>,
    grad_scale: T,
    proj_grad: &mut P::Grad,
) -> Result<CrossBlockLoss<T>> {
    let m = zc.num_blocks();
    if m < 2 {
        return Err(Error::TooFewBlocks(m));
    }
    let mut projected = Vec::with_capacity(m);
    let mut caches = Vec::with_capacity(m);
    for i in 0..m {
        let (y, cache) = projector.project(&zc.pooled(i))?;
        projected.push(Embeddings::new(y)?);
        caches.push(cache);
    }

    let mut grads: Vec<DenseMatrix<T>> =
        projected.iter().map(|e| DenseMatrix::zeros(e.n(), e.d())).collect();
    let (mut value, mut sim, mut std, mut cov) = (T::zero(), T::zero(), T::zero(), T::zero());
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let l = vicreg_loss(&projected[i], &projected[j], coeffs)?;
            value += l.total.value;
            sim += l.sim;
            std += l.std;
            cov += l.cov;
            grads[i].add_scaled(&l.total.grads[0], T::one())?;
            grads[j].add_scaled(&l.total.grads[1], T::one())?;
        }
    }
    let norm = T::from_count(m * (m - 1));
    let inv = grad_scale / norm;

    let mut grad = zc.zeros_like();
    for i in 0..m {
        let g_proj = grads[i].scale(inv);
        let g_pooled = projector.backprop(&caches[i], &g_proj, proj_grad)?;
        let p = zc.patches(i);
        let share = T::one() / T::from_count(p);
        let dst = &mut grad.blocks[i];
        for b in 0..zc.batch {
            for r in 0..p {
                for (o, &g) in dst.row_mut(b * p + r).iter_mut().zip(g_pooled.row(b)) {
                    *o = g * share;
                }
            }
        }
    }
    Ok(CrossBlockLoss { value: value / norm, grad, sim: sim / norm, std: std / norm, cov: cov / norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Embeddings<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Embeddings::new(DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn variance_of_constant_batch() {
        let z = Embeddings::from_rows(&vec![vec![0.5f64, -2.0, 3.0]; 4]).unwrap();
        let l = variance_term(&z, 1.0, 1e-4).unwrap();
        assert!((l.value - 0.99).abs() < 1e-15);
        assert!(l.grad().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn variance_hinge_inactive_for_wide_batches() {
        let z = random(16, 5, 2).values().scale(10.0);
        let l = variance_term(&Embeddings::new(z).unwrap(), 1.0, 1e-4).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn covariance_by_hand_and_diagonal_case() {
        let z = Embeddings::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(covariance_term(&z).unwrap().value, 4.0);
        // (±1, 0) and (0, ±1): C = diag(2/3·..), off-diagonals exactly zero
        let z = Embeddings::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]])
            .unwrap();
        assert_eq!(covariance_term(&z).unwrap().value, 0.0);
        let single = Embeddings::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(covariance_term(&single).unwrap().value, 0.0);
    }

    #[test]
    fn invariance_basics() {
        let a = random(5, 3, 1);
        assert_eq!(invariance_term(&a, &a).unwrap().value, 0.0);
        let x = Embeddings::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Embeddings::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(invariance_term(&x, &y).unwrap().value, 1.0);
        let b = random(5, 2, 1);
        assert!(matches!(invariance_term(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn vicreg_vanishes_on_healthy_identical_branches() {
        // ±3 e_k: per-dim std ≥ 1, covariance diagonal
        let mut rows = Vec::new();
        for k in 0..3 {
            for s in [3.0, -3.0] {
                let mut r = vec![0.0; 3];
                r[k] = s;
                rows.push(r);
            }
        }
        let z = Embeddings::from_rows(&rows).unwrap();
        let l = vicreg_loss(&z, &z, &VicRegCoefficients::default()).unwrap();
        assert_eq!(l.total.value, 0.0);
    }

    #[test]
    fn too_few_blocks() {
        let zc = BlockEmbeddings::new(3, vec![random(6, 2, 0).into_matrix()]).unwrap();
        let r = cross_block_vicreg(&zc, &IdentityProjector, &VicRegCoefficients::default(), &mut ());
        assert_eq!(r.unwrap_err(), Error::TooFewBlocks(1));
    }

    #[test]
    fn defaults() {
        let c = VicRegCoefficients::<f64>::default();
        assert_eq!((c.beta_sim, c.beta_std, c.beta_cov, c.beta_vicreg), (25.0, 25.0, 1.0, 0.001));
        assert_eq!((c.gamma, c.epsilon), (1.0, 1e-4));
        assert!(c.validate().is_ok());
        assert!(VicRegCoefficients { epsilon: 0.0, ..c }.validate().is_err());
        assert!(VicRegCoefficients { beta_cov: -1.0, ..c }.validate().is_err());
    }
}
