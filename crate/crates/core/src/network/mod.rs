//! Patch encoder, predictor and projector with hand-written backpropagation.

pub mod checkpoint;
mod forward;
mod layers;
mod params;

pub use checkpoint::{read_arrays, read_checkpoint, write_checkpoint, StoredArray};
pub use forward::{
    encode_all, encoder_backward, encoder_forward, loss_and_gradients, loss_value, predictor_backward,
    predictor_forward, EncoderCache, Network, PredictorCache, ProjectorCache, TargetMode,
};
pub use layers::{sincos_position, Activation, Linear};
pub use params::{
    ema_update, ContextPool, CrossAttention, Encoder, EncoderConfig, GradientSet, ModelConfig, NetworkParams, ParamGroup, ParamView,
    ParamViewMut, Predictor, PredictorKind, ProjectorNet, ResidualBlock, VicregSource,
};
