//! Block masking over the patch grid and the masked prediction objective.

mod loss;
mod masking;

pub use loss::{combined_loss, jepa_loss, CombinedLoss, PatchPrediction};
pub use masking::{sample_masks, BlockMaskSet, MaskingConfig};
