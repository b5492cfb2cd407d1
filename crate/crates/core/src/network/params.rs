use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::network::layers::{Activation, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_dim: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Add a fixed sine/cosine position code after the patch embedding.
    pub pos_embed: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_dim: 12, embed_dim: 32, num_layers: 1, hidden_dim: 64, activation: Activation::Gelu, pos_embed: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    /// Single `d × d` affine map.
    Linear,
    /// `d → 2d → d` with the encoder activation.
    #[default]
    Mlp,
}

/// How the predictor summarizes the context tokens of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ContextPool {
    /// Plain mean of the context embeddings, the same for every target patch.
    Mean,
    /// Single-head softmax attention: the query comes from the mask token and
    /// position code of the target patch, keys from the context embeddings,
    /// values are the context embeddings themselves.
    #[default]
    Attention,
}

/// Which embeddings feed the cross-block regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VicregSource {
    /// Predictor outputs for each target block; the projector follows the predictor.
    #[default]
    Predictor,
    /// Context-encoder features of the target-block patches; the projector
    /// follows the encoder.
    ContextEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorKind,
    pub context_pool: ContextPool,
    /// Multiplier on the position code added to each mask token.
    pub mask_pos_scale: f64,
    pub vicreg_source: VicregSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            predictor: PredictorKind::Mlp,
            context_pool: ContextPool::Attention,
            mask_pos_scale: 1.0,
            vicreg_source: VicregSource::Predictor,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.patch_dim == 0 || e.embed_dim == 0 || e.hidden_dim == 0 {
            return Err(Error::InvalidConfig("model: all dimensions must be >= 1".into()));
        }
        if !self.mask_pos_scale.is_finite() {
            return Err(Error::InvalidConfig("model: mask_pos_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Residual MLP block `h + fc2(act(fc1 h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub embed: Linear,
    pub blocks: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let embed = Linear::init(cfg.patch_dim, cfg.embed_dim, rng);
        let blocks = (0..cfg.num_layers)
            .map(|_| ResidualBlock {
                fc1: Linear::init(cfg.embed_dim, cfg.hidden_dim, rng),
                fc2: Linear::init(cfg.hidden_dim, cfg.embed_dim, rng),
            })
            .collect();
        Self { embed, blocks }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Linear(Linear),
    Mlp { fc1: Linear, fc2: Linear },
}

impl Predictor {
    pub fn init<R: Rng + ?Sized>(kind: PredictorKind, d: usize, rng: &mut R) -> Self {
        match kind {
            PredictorKind::Linear => Predictor::Linear(Linear::init(d, d, rng)),
            PredictorKind::Mlp => Predictor::Mlp { fc1: Linear::init(d, 2 * d, rng), fc2: Linear::init(2 * d, d, rng) },
        }
    }
}

/// Query and key maps of the predictor's context attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
}

impl CrossAttention {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self { query: Linear::init(d, d, rng), key: Linear::init(d, d, rng) }
    }
}

/// Expander `d → 2d → 2d` applied before the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl ProjectorNet {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::init(d, 2 * d, rng), fc2: Linear::init(2 * d, 2 * d, rng), activation: Activation::Gelu }
    }
}

/// Every trainable array of the model plus the EMA target encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub context: Encoder,
    pub target: Encoder,
    pub predictor: Predictor,
    /// Present when the model pools context by attention.
    pub attention: Option<CrossAttention>,
    pub projector: ProjectorNet,
    pub mask_token: Vec<f64>,
}

/// Named view of one parameter array.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ParamViewMut<'_> {
    /// Weight decay applies to matrices only; biases and the mask token are exempt.
    pub fn decays(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Which part of the model an array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Context,
    Target,
    Predictor,
    Projector,
    MaskToken,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        match name.split('.').next() {
            Some("context") => ParamGroup::Context,
            Some("target") => ParamGroup::Target,
            Some("predictor") => ParamGroup::Predictor,
            Some("projector") => ParamGroup::Projector,
            _ => ParamGroup::MaskToken,
        }
    }
}

fn linear_views<'a>(out: &mut Vec<ParamView<'a>>, prefix: impl Into<String>, lin: &'a Linear) {
    let prefix = prefix.into();
    let shape = vec![lin.weight.rows(), lin.weight.cols()];
    out.push(ParamView { name: format!("{prefix}.weight"), shape, data: lin.weight.as_slice() });
    out.push(ParamView { name: format!("{prefix}.bias"), shape: vec![lin.bias.len()], data: &lin.bias });
}

fn linear_views_mut<'a>(out: &mut Vec<ParamViewMut<'a>>, prefix: impl Into<String>, lin: &'a mut Linear) {
    let prefix = prefix.into();
    let shape = vec![lin.weight.rows(), lin.weight.cols()];
    out.push(ParamViewMut { name: format!("{prefix}.weight"), shape, data: lin.weight.as_mut_slice() });
    let n = lin.bias.len();
    out.push(ParamViewMut { name: format!("{prefix}.bias"), shape: vec![n], data: &mut lin.bias });
}

impl NetworkParams {
    /// Fresh parameters; the target encoder starts as an exact copy of the
    /// context encoder.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.encoder.embed_dim;
        let context = Encoder::init(&cfg.encoder, rng);
        let predictor = Predictor::init(cfg.predictor, d, rng);
        let projector = ProjectorNet::init(d, rng);
        let attention = (cfg.context_pool == ContextPool::Attention).then(|| CrossAttention::init(d, rng));
        Self { target: context.clone(), context, predictor, attention, projector, mask_token: vec![0.0; d] }
    }

    pub fn embed_dim(&self) -> usize {
        self.context.embed.outputs()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for v in z.arrays_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn arrays(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (tag, enc) in [("context", &self.context), ("target", &self.target)] {
            linear_views(&mut out, format!("{tag}.embed"), &enc.embed);
            for (i, b) in enc.blocks.iter().enumerate() {
                linear_views(&mut out, format!("{tag}.blocks.{i}.fc1"), &b.fc1);
                linear_views(&mut out, format!("{tag}.blocks.{i}.fc2"), &b.fc2);
            }
        }
        match &self.predictor {
            Predictor::Linear(l) => linear_views(&mut out, "predictor.linear", l),
            Predictor::Mlp { fc1, fc2 } => {
                linear_views(&mut out, "predictor.fc1", fc1);
                linear_views(&mut out, "predictor.fc2", fc2);
            }
        }
        if let Some(a) = &self.attention {
            linear_views(&mut out, "predictor.attn.query", &a.query);
            linear_views(&mut out, "predictor.attn.key", &a.key);
        }
        linear_views(&mut out, "projector.fc1", &self.projector.fc1);
        linear_views(&mut out, "projector.fc2", &self.projector.fc2);
        out.push(ParamView { name: "mask_token".into(), shape: vec![self.mask_token.len()], data: &self.mask_token });
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        for (tag, enc) in [("context", &mut self.context), ("target", &mut self.target)] {
            linear_views_mut(&mut out, format!("{tag}.embed"), &mut enc.embed);
            for (i, b) in enc.blocks.iter_mut().enumerate() {
                linear_views_mut(&mut out, format!("{tag}.blocks.{i}.fc1"), &mut b.fc1);
                linear_views_mut(&mut out, format!("{tag}.blocks.{i}.fc2"), &mut b.fc2);
            }
        }
        match &mut self.predictor {
            Predictor::Linear(l) => linear_views_mut(&mut out, "predictor.linear", l),
            Predictor::Mlp { fc1, fc2 } => {
                linear_views_mut(&mut out, "predictor.fc1", fc1);
                linear_views_mut(&mut out, "predictor.fc2", fc2);
            }
        }
        if let Some(a) = &mut self.attention {
            linear_views_mut(&mut out, "predictor.attn.query", &mut a.query);
            linear_views_mut(&mut out, "predictor.attn.key", &mut a.key);
        }
        linear_views_mut(&mut out, "projector.fc1", &mut self.projector.fc1);
        linear_views_mut(&mut out, "projector.fc2", &mut self.projector.fc2);
        let n = self.mask_token.len();
        out.push(ParamViewMut { name: "mask_token".into(), shape: vec![n], data: &mut self.mask_token });
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `other` has exactly the same array names and shapes.
    pub fn check_same_layout(&self, other: &NetworkParams) -> Result<()> {
        let a = self.arrays();
        let b = other.arrays();
        if a.len() != b.len() {
            return Err(shape_mismatch(format!("{} arrays", a.len()), format!("{} arrays", b.len())));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(shape_mismatch(
                    format!("{} {:?}", x.name, x.shape),
                    format!("{} {:?}", y.name, y.shape),
                ));
            }
        }
        Ok(())
    }
}

/// Gradients of the loss, one array per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub NetworkParams);

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientSet(params.zeros_like())
    }

    pub fn attention_mut(&mut self) -> Result<&mut CrossAttention> {
        self.0.attention.as_mut().ok_or_else(|| shape_mismatch("attention gradient", "model without attention"))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.arrays().iter().flat_map(|a| a.data.iter()).fold(0.0, |m, &v| m.max(v.abs()))
    }
}

impl Deref for GradientSet {
    type Target = NetworkParams;
    fn deref(&self) -> &NetworkParams {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut NetworkParams {
        &mut self.0
    }
}

/// `target ← m·target + (1 − m)·context`, array by array.
pub fn ema_update(target: &mut Encoder, context: &Encoder, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::MomentumOutOfRange(momentum));
    }
    let mix = |t: &mut [f64], c: &[f64]| {
        for (ti, &ci) in t.iter_mut().zip(c) {
            *ti = momentum * *ti + (1.0 - momentum) * ci;
        }
    };
    if target.blocks.len() != context.blocks.len() || target.embed.weight.shape() != context.embed.weight.shape() {
        return Err(shape_mismatch("target encoder shaped like context", "different encoder shape"));
    }
    let pairs = std::iter::once((&mut target.embed, &context.embed)).chain(
        target
            .blocks
            .iter_mut()
            .zip(&context.blocks)
            .flat_map(|(t, c)| [(&mut t.fc1, &c.fc1), (&mut t.fc2, &c.fc2)]),
    );
    for (t, c) in pairs {
        if t.weight.shape() != c.weight.shape() || t.bias.len() != c.bias.len() {
            return Err(shape_mismatch("target encoder shaped like context", "different layer shape"));
        }
        mix(t.weight.as_mut_slice(), c.weight.as_slice());
        mix(&mut t.bias, &c.bias);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkParams {
        let cfg = ModelConfig {
            encoder: EncoderConfig { patch_dim: 3, embed_dim: 4, num_layers: 1, hidden_dim: 5, ..Default::default() },
            ..Default::default()
        };
        NetworkParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn target_starts_as_copy_and_layout_is_named() {
        let p = small();
        assert_eq!(p.context, p.target);
        let names: Vec<String> = p.arrays().into_iter().map(|a| a.name).collect();
        assert_eq!(names[0], "context.embed.weight");
        assert!(names.contains(&"predictor.fc2.bias".to_string()));
        assert_eq!(names.last().unwrap(), "mask_token");
        assert_eq!(p.mask_token, vec![0.0; 4]);
        assert!(p.projector.fc1.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = small();
        let bound = 1.0 / 3f64.sqrt();
        assert!(p.context.embed.weight.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn ema_arithmetic() {
        let mut p = small();
        let mut target = p.context.clone();
        target.embed.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        p.context.embed.weight.as_mut_slice().iter_mut().for_each(|w| *w = 1.0);

        let before = target.clone();
        ema_update(&mut target, &p.context, 1.0).unwrap();
        assert_eq!(target, before);

        ema_update(&mut target, &p.context, 0.996).unwrap();
        for &w in target.embed.weight.as_slice() {
            assert!((w - 0.004).abs() < 1e-15);
        }

        ema_update(&mut target, &p.context, 0.0).unwrap();
        assert_eq!(target, p.context);

        assert_eq!(ema_update(&mut target, &p.context, 1.5), Err(Error::MomentumOutOfRange(1.5)));
    }
}
