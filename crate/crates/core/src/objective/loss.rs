use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;
use crate::vicreg::{
    cross_block_vicreg_scaled, BlockEmbeddings, CrossBlockLoss, LossWithGrad, Projector,
    VicRegCoefficients,
};

/// Predicted and target patch embeddings for every target block, in the
/// layout of [`BlockEmbeddings`]. Targets are constants: no gradient is ever
/// produced for them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction<T> {
    pub predicted: BlockEmbeddings<T>,
    pub target: BlockEmbeddings<T>,
}

impl<T: Scalar> PatchPrediction<T> {
    pub fn new(predicted: BlockEmbeddings<T>, target: BlockEmbeddings<T>) -> Result<Self> {
        let same = predicted.batch == target.batch
            && predicted.blocks.len() == target.blocks.len()
            && predicted.blocks.iter().zip(&target.blocks).all(|(p, t)| p.shape() == t.shape());
        if !same {
            return Err(shape_mismatch("identical predicted/target block structure", "differing structure"));
        }
        Ok(Self { predicted, target })
    }

    pub fn num_blocks(&self) -> usize {
        self.predicted.num_blocks()
    }
}

/// Masked prediction loss `1/|M| Σ_i Σ_{j∈B_i} ‖b̂_j − b_j‖²`, averaged over
/// the images of the batch. Gradients (one per block) are with respect to the
/// predictions only.
pub fn jepa_loss<T: Scalar>(pred: &PatchPrediction<T>) -> Result<LossWithGrad<T>> {
    let m = pred.num_blocks();
    if m == 0 || pred.predicted.batch == 0 {
        return Err(Error::EmptyTargets);
    }
    let norm = T::from_count(m * pred.predicted.batch);
    let two_over = T::lit(2.0) / norm;
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(m);
    for (p, t) in pred.predicted.blocks.iter().zip(&pred.target.blocks) {
        let diff = p.sub(t)?;
        value += diff.as_slice().iter().map(|&x| x * x).sum::<T>();
        grads.push(diff.scale(two_over));
    }
    Ok(LossWithGrad { value: value / norm, grads })
}

/// `L = L_jepa + β_vicreg · L_vicreg` with gradients split by input.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss<T> {
    pub value: T,
    pub jepa: T,
    /// Unweighted cross-block regularizer and its parts.
    pub vicreg: T,
    pub vicreg_sim: T,
    pub vicreg_std: T,
    pub vicreg_cov: T,
    /// Gradient with respect to the predictions.
    pub grad_pred: Vec<DenseMatrix<T>>,
    /// Gradient with respect to the regularized block embeddings, already
    /// scaled by `β_vicreg`.
    pub grad_zc: BlockEmbeddings<T>,
}

/// Combined objective. `zc` are the block embeddings fed to the cross-block
/// regularizer; projector parameter gradients (scaled by `β_vicreg`) are added
/// into `proj_grad`.
pub fn combined_loss<T: Scalar, P: Projector<T>>(
    pred: &PatchPrediction<T>,
    zc: &BlockEmbeddings<T>,
    projector: &P,
    coeffs: &VicRegCoefficients<T>,
    proj_grad: &mut P::Grad,
) -> Result<CombinedLoss<T>> {
    let jepa = jepa_loss(pred)?;
    let CrossBlockLoss { value: reg, grad, sim, std, cov } =
        cross_block_vicreg_scaled(zc, projector, coeffs, coeffs.beta_vicreg, proj_grad)?;
    Ok(CombinedLoss {
        value: jepa.value + coeffs.beta_vicreg * reg,
        jepa: jepa.value,
        vicreg: reg,
        vicreg_sim: sim,
        vicreg_std: std,
        vicreg_cov: cov,
        grad_pred: jepa.grads,
        grad_zc: grad,
    })
}
