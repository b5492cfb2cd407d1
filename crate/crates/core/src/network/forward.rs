use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::network::layers::{sincos_position, Activation};
use crate::network::params::{Encoder, GradientSet, ModelConfig, NetworkParams, Predictor, ProjectorNet, VicregSource};
use crate::objective::{combined_loss, BlockMaskSet, CombinedLoss, PatchPrediction};
use crate::vicreg::{BlockEmbeddings, Projector, VicRegCoefficients};
use crate::Matrix;

/// How the target branch is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Targets come from the separate target encoder and are constants.
    #[default]
    StopGrad,
    /// Targets come from the context encoder itself and the loss gradient
    /// flows through them.
    Shared,
}

/// Activations kept by one encoder application.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Matrix,
    /// Input to each residual block, then the final output.
    hidden: Vec<Matrix>,
    /// `fc1` pre-activations per block.
    pre: Vec<Matrix>,
    /// Activated hidden layer per block.
    act: Vec<Matrix>,
}

impl EncoderCache {
    pub fn output(&self) -> &Matrix {
        self.hidden.last().expect("encoder cache holds at least the embedding")
    }
}

fn check_images(images: &[Matrix], num_patches: usize, patch_dim: usize) -> Result<()> {
    if images.is_empty() {
        return Err(shape_mismatch("at least one image", "empty batch"));
    }
    for img in images {
        if img.shape() != (num_patches, patch_dim) {
            return Err(shape_mismatch(
                format!("{num_patches}x{patch_dim} patch grid"),
                format!("{}x{}", img.rows(), img.cols()),
            ));
        }
    }
    Ok(())
}

/// Rows `indices` of every image, image-major.
fn gather_patches(images: &[Matrix], indices: &[usize]) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(images.len() * indices.len() * images[0].cols());
    let mut positions = Vec::with_capacity(images.len() * indices.len());
    for img in images {
        for &i in indices {
            data.extend_from_slice(img.row(i));
            positions.push(i);
        }
    }
    (Matrix::from_vec_unchecked(positions.len(), images[0].cols(), data), positions)
}

/// Applies `enc` to the rows of `x`; `positions` are the grid indices of the rows.
pub fn encoder_forward(
    enc: &Encoder,
    cfg: &ModelConfig,
    grid_w: usize,
    x: &Matrix,
    positions: &[usize],
) -> Result<EncoderCache> {
    if x.cols() != enc.embed.inputs() {
        return Err(shape_mismatch(format!("patch_dim {}", enc.embed.inputs()), format!("{}", x.cols())));
    }
    let mut h = enc.embed.forward(x)?;
    if cfg.encoder.pos_embed {
        let d = h.cols();
        for (r, &p) in positions.iter().enumerate() {
            for (v, e) in h.row_mut(r).iter_mut().zip(sincos_position(p, grid_w, d)) {
                *v += e;
            }
        }
    }
    let act_fn = cfg.encoder.activation;
    let mut cache = EncoderCache { input: x.clone(), hidden: Vec::new(), pre: Vec::new(), act: Vec::new() };
    for blk in &enc.blocks {
        let pre = blk.fc1.forward(&h)?;
        let act = act_fn.forward(&pre);
        let mut next = blk.fc2.forward(&act)?;
        next.add_scaled(&h, 1.0)?;
        cache.hidden.push(h);
        cache.pre.push(pre);
        cache.act.push(act);
        h = next;
    }
    cache.hidden.push(h);
    Ok(cache)
}

/// Accumulates parameter gradients of `enc` for output gradient `grad_out`.
pub fn encoder_backward(
    enc: &Encoder,
    act_fn: Activation,
    cache: &EncoderCache,
    grad_out: &Matrix,
    grad: &mut Encoder,
) -> Result<()> {
    let mut g = grad_out.clone();
    for (l, blk) in enc.blocks.iter().enumerate().rev() {
        let g_act = blk.fc2.backward(&cache.act[l], &g, &mut grad.blocks[l].fc2)?;
        let g_pre = act_fn.backward(&cache.pre[l], &g_act);
        let g_in = blk.fc1.backward(&cache.hidden[l], &g_pre, &mut grad.blocks[l].fc1)?;
        g.add_scaled(&g_in, 1.0)?;
    }
    enc.embed.accumulate(&cache.input, &g, &mut grad.embed)
}

/// Embeddings of every patch of every image (`batch · H·W` rows, image-major).
pub fn encode_all(enc: &Encoder, cfg: &ModelConfig, grid_w: usize, images: &[Matrix]) -> Result<Matrix> {
    let p = images.first().map_or(0, Matrix::rows);
    check_images(images, p, cfg.encoder.patch_dim)?;
    let all: Vec<usize> = (0..p).collect();
    let (x, pos) = gather_patches(images, &all);
    let mut cache = encoder_forward(enc, cfg, grid_w, &x, &pos)?;
    Ok(cache.hidden.pop().expect("encoder cache holds at least the embedding"))
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    input: Matrix,
    pre: Option<Matrix>,
    hid: Option<Matrix>,
}

pub fn predictor_forward(pred: &Predictor, act_fn: Activation, x: &Matrix) -> Result<(Matrix, PredictorCache)> {
    match pred {
        Predictor::Linear(l) => Ok((l.forward(x)?, PredictorCache { input: x.clone(), pre: None, hid: None })),
        Predictor::Mlp { fc1, fc2 } => {
            let pre = fc1.forward(x)?;
            let hid = act_fn.forward(&pre);
            let out = fc2.forward(&hid)?;
            Ok((out, PredictorCache { input: x.clone(), pre: Some(pre), hid: Some(hid) }))
        }
    }
}

pub fn predictor_backward(
    pred: &Predictor,
    act_fn: Activation,
    cache: &PredictorCache,
    grad_out: &Matrix,
    grad: &mut Predictor,
) -> Result<Matrix> {
    match (pred, grad) {
        (Predictor::Linear(l), Predictor::Linear(gl)) => l.backward(&cache.input, grad_out, gl),
        (Predictor::Mlp { fc1, fc2 }, Predictor::Mlp { fc1: g1, fc2: g2 }) => {
            let (pre, hid) = match (&cache.pre, &cache.hid) {
                (Some(p), Some(h)) => (p, h),
                _ => return Err(Error::NoCachedForward),
            };
            let g_hid = fc2.backward(hid, grad_out, g2)?;
            let g_pre = act_fn.backward(pre, &g_hid);
            fc1.backward(&cache.input, &g_pre, g1)
        }
        _ => Err(shape_mismatch("gradient predictor of the same kind", "different predictor kind")),
    }
}

/// `(input, pre-activation, hidden)` of one projector call.
pub type ProjectorCache = (Matrix, Matrix, Matrix);

impl Projector<f64> for ProjectorNet {
    type Cache = ProjectorCache;
    type Grad = ProjectorNet;

    fn project(&self, x: &Matrix) -> Result<(Matrix, ProjectorCache)> {
        let pre = self.fc1.forward(x)?;
        let hid = self.activation.forward(&pre);
        let out = self.fc2.forward(&hid)?;
        Ok((out, (x.clone(), pre, hid)))
    }

    fn backprop(&self, cache: &ProjectorCache, grad_out: &Matrix, grad: &mut ProjectorNet) -> Result<Matrix> {
        let (x, pre, hid) = cache;
        let g_hid = self.fc2.backward(hid, grad_out, &mut grad.fc2)?;
        let g_pre = self.activation.backward(pre, &g_hid);
        self.fc1.backward(x, &g_pre, &mut grad.fc1)
    }
}

#[derive(Debug, Clone)]
struct ContextState {
    cache: EncoderCache,
    batch: usize,
    per_image: usize,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    query_in: Matrix,
    queries: Matrix,
    /// Softmax weights per image, `|target| × |context|`.
    weights: Vec<Matrix>,
}

#[derive(Debug, Clone)]
struct PredictState {
    caches: Vec<PredictorCache>,
    attn: Vec<Option<AttentionCache>>,
    keys: Option<Matrix>,
    output: BlockEmbeddings<f64>,
}

/// One forward pass through the model with the activations needed by
/// [`Network::backward`].
///
/// The stages can be run one at a time (`forward_context`, `forward_predict`,
/// `forward_targets`, `forward_regularized`) or together with
/// [`Network::forward`].
pub struct Network<'a> {
    cfg: &'a ModelConfig,
    params: &'a NetworkParams,
    grid_w: usize,
    context: Option<ContextState>,
    predict: Option<PredictState>,
    shared_targets: Option<Vec<EncoderCache>>,
    online_regularized: Option<Vec<EncoderCache>>,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a NetworkParams, grid_w: usize) -> Self {
        Self { cfg, params, grid_w, context: None, predict: None, shared_targets: None, online_regularized: None }
    }

    fn num_patches(&self, masks: &BlockMaskSet) -> Result<usize> {
        if masks.grid_w != self.grid_w {
            return Err(shape_mismatch(format!("grid width {}", self.grid_w), format!("{}", masks.grid_w)));
        }
        Ok(masks.num_patches())
    }

    /// Context-encoder embeddings of the visible patches, `batch · |context|` rows.
    pub fn forward_context(&mut self, images: &[Matrix], masks: &BlockMaskSet) -> Result<Matrix> {
        check_images(images, self.num_patches(masks)?, self.cfg.encoder.patch_dim)?;
        let (x, pos) = gather_patches(images, &masks.context_indices);
        let cache = encoder_forward(&self.params.context, self.cfg, self.grid_w, &x, &pos)?;
        let out = cache.output().clone();
        self.context = Some(ContextState { cache, batch: images.len(), per_image: masks.context_indices.len() });
        self.predict = None;
        Ok(out)
    }

    /// Predictions for every target patch from the cached context embeddings.
    ///
    /// The predictor input for patch `j` of image `b` is the pooled context of
    /// `b` plus the query input `u_j = mask_token + mask_pos_scale · pos(j)`.
    /// Mean pooling gives every patch the same context; attention pooling
    /// weights the context rows by `softmax(q_j · k_i / √d)` with
    /// `q_j = W_q u_j + b_q` and `k_i = W_k h_i + b_k`.
    pub fn forward_predict(&mut self, masks: &BlockMaskSet) -> Result<BlockEmbeddings<f64>> {
        let ctx = self.context.as_ref().ok_or(Error::NoCachedForward)?;
        let d = self.params.embed_dim();
        let h = ctx.cache.output();
        let (batch, per) = (ctx.batch, ctx.per_image);
        let scale = self.cfg.mask_pos_scale;
        let act_fn = self.cfg.encoder.activation;
        let keys = match &self.params.attention {
            Some(att) => Some(att.key.forward(h)?),
            None => None,
        };
        let mean = pool_rows(h, batch, per);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut caches = Vec::with_capacity(masks.num_targets());
        let mut attn = Vec::with_capacity(masks.num_targets());
        let mut blocks = Vec::with_capacity(masks.num_targets());
        for target in &masks.targets {
            let t = target.len();
            let codes: Vec<Vec<f64>> = target.iter().map(|&j| sincos_position(j, self.grid_w, d)).collect();
            let u = Matrix::from_fn(t, d, |p, c| self.params.mask_token[c] + scale * codes[p][c]);
            let mut x = Matrix::zeros(batch * t, d);
            match (&self.params.attention, &keys) {
                (Some(att), Some(keys)) => {
                    let q = att.query.forward(&u)?;
                    let mut weights = Vec::with_capacity(batch);
                    for b in 0..batch {
                        let hb = row_block(h, b * per, per);
                        let mut a = q.matmul_t(&row_block(keys, b * per, per))?.scale(inv_sqrt_d);
                        softmax_rows(&mut a);
                        let pooled = a.matmul(&hb)?;
                        for p in 0..t {
                            x.row_mut(b * t + p).copy_from_slice(pooled.row(p));
                        }
                        weights.push(a);
                    }
                    attn.push(Some(AttentionCache { query_in: u.clone(), queries: q, weights }));
                }
                _ => {
                    for b in 0..batch {
                        for p in 0..t {
                            x.row_mut(b * t + p).copy_from_slice(mean.row(b));
                        }
                    }
                    attn.push(None);
                }
            }
            for r in 0..batch * t {
                for (v, e) in x.row_mut(r).iter_mut().zip(u.row(r % t)) {
                    *v += e;
                }
            }
            let (out, cache) = predictor_forward(&self.params.predictor, act_fn, &x)?;
            blocks.push(out);
            caches.push(cache);
        }
        let output = BlockEmbeddings::new(batch, blocks)?;
        self.predict = Some(PredictState { caches, attn, keys, output: output.clone() });
        Ok(output)
    }

    /// Target embeddings for every target patch. Under [`TargetMode::Shared`]
    /// the context encoder produces them and its activations are cached.
    pub fn forward_targets(
        &mut self,
        images: &[Matrix],
        masks: &BlockMaskSet,
        mode: TargetMode,
    ) -> Result<BlockEmbeddings<f64>> {
        check_images(images, self.num_patches(masks)?, self.cfg.encoder.patch_dim)?;
        let enc = match mode {
            TargetMode::StopGrad => &self.params.target,
            TargetMode::Shared => &self.params.context,
        };
        let mut caches = Vec::with_capacity(masks.num_targets());
        for target in &masks.targets {
            let (x, pos) = gather_patches(images, target);
            caches.push(encoder_forward(enc, self.cfg, self.grid_w, &x, &pos)?);
        }
        let out = BlockEmbeddings::new(images.len(), caches.iter().map(|c| c.output().clone()).collect())?;
        self.shared_targets = (mode == TargetMode::Shared).then_some(caches);
        Ok(out)
    }

    /// Block embeddings handed to the cross-block regularizer.
    pub fn forward_regularized(&mut self, images: &[Matrix], masks: &BlockMaskSet) -> Result<BlockEmbeddings<f64>> {
        match self.cfg.vicreg_source {
            VicregSource::Predictor => {
                let p = self.predict.as_ref().ok_or(Error::NoCachedForward)?;
                self.online_regularized = None;
                Ok(p.output.clone())
            }
            VicregSource::ContextEncoder => {
                check_images(images, self.num_patches(masks)?, self.cfg.encoder.patch_dim)?;
                let mut caches = Vec::with_capacity(masks.num_targets());
                for target in &masks.targets {
                    let (x, pos) = gather_patches(images, target);
                    caches.push(encoder_forward(&self.params.context, self.cfg, self.grid_w, &x, &pos)?);
                }
                let out = BlockEmbeddings::new(images.len(), caches.iter().map(|c| c.output().clone()).collect())?;
                self.online_regularized = Some(caches);
                Ok(out)
            }
        }
    }

    /// All stages: returns the prediction/target pair and the regularized embeddings.
    pub fn forward(
        &mut self,
        images: &[Matrix],
        masks: &BlockMaskSet,
        mode: TargetMode,
    ) -> Result<(PatchPrediction<f64>, BlockEmbeddings<f64>)> {
        self.forward_context(images, masks)?;
        let predicted = self.forward_predict(masks)?;
        let target = self.forward_targets(images, masks, mode)?;
        let zc = self.forward_regularized(images, masks)?;
        Ok((PatchPrediction::new(predicted, target)?, zc))
    }

    /// Reverse pass for loss gradients with respect to the predictions
    /// (`grad_pred`, the masked-prediction part) and the regularized
    /// embeddings (`grad_zc`). Gradients are added into `grads`; the
    /// target-encoder part is never touched.
    pub fn backward(
        &self,
        grad_pred: &[Matrix],
        grad_zc: &BlockEmbeddings<f64>,
        grads: &mut GradientSet,
    ) -> Result<()> {
        let ctx = self.context.as_ref().ok_or(Error::NoCachedForward)?;
        let pred = self.predict.as_ref().ok_or(Error::NoCachedForward)?;
        let m = pred.caches.len();
        if grad_pred.len() != m || grad_zc.num_blocks() != m {
            return Err(shape_mismatch(format!("{m} block gradients"), format!("{}/{}", grad_pred.len(), grad_zc.num_blocks())));
        }
        let act_fn = self.cfg.encoder.activation;
        let d = self.params.embed_dim();
        let (batch, per) = (ctx.batch, ctx.per_image);
        let h = ctx.cache.output();
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut g_mean = Matrix::zeros(batch, d);
        let mut g_ctx = Matrix::zeros(batch * per, d);
        let mut g_keys = Matrix::zeros(batch * per, d);
        for i in 0..m {
            let mut g_out = grad_pred[i].clone();
            if self.cfg.vicreg_source == VicregSource::Predictor {
                g_out.add_scaled(&grad_zc.blocks[i], 1.0)?;
            }
            let g_in = predictor_backward(&self.params.predictor, act_fn, &pred.caches[i], &g_out, &mut grads.predictor)?;
            let t = g_in.rows() / batch;
            for r in 0..g_in.rows() {
                for (tok, &g) in grads.mask_token.iter_mut().zip(g_in.row(r)) {
                    *tok += g;
                }
            }
            match (&pred.attn[i], &self.params.attention, &pred.keys) {
                (Some(cache), Some(att), Some(keys)) => {
                    let mut g_q = Matrix::zeros(t, d);
                    for b in 0..batch {
                        let a = &cache.weights[b];
                        let g_x = row_block(&g_in, b * t, t);
                        let hb = row_block(h, b * per, per);
                        add_rows(&mut g_ctx, b * per, &a.t_matmul(&g_x)?);
                        // softmax backward: g_s = a ⊙ (g_a − Σ_i g_a a)
                        let g_a = g_x.matmul_t(&hb)?;
                        let mut g_s = g_a;
                        for p in 0..t {
                            let (ga, ar) = (g_s.row_mut(p), a.row(p));
                            let dot: f64 = ga.iter().zip(ar).map(|(x, y)| x * y).sum();
                            for (x, &y) in ga.iter_mut().zip(ar) {
                                *x = y * (*x - dot) * inv_sqrt_d;
                            }
                        }
                        g_q.add_scaled(&g_s.matmul(&row_block(keys, b * per, per))?, 1.0)?;
                        add_rows(&mut g_keys, b * per, &g_s.t_matmul(&cache.queries)?);
                    }
                    let g_u = att.query.backward(&cache.query_in, &g_q, &mut grads.attention_mut()?.query)?;
                    for r in 0..t {
                        for (tok, &g) in grads.mask_token.iter_mut().zip(g_u.row(r)) {
                            *tok += g;
                        }
                    }
                }
                (None, _, _) => {
                    for r in 0..g_in.rows() {
                        for (p, &g) in g_mean.row_mut(r / t).iter_mut().zip(g_in.row(r)) {
                            *p += g;
                        }
                    }
                }
                _ => return Err(Error::NoCachedForward),
            }
        }
        if let Some(att) = &self.params.attention {
            let g_h = att.key.backward(h, &g_keys, &mut grads.attention_mut()?.key)?;
            g_ctx.add_scaled(&g_h, 1.0)?;
        }
        let share = 1.0 / per as f64;
        for r in 0..batch * per {
            for (x, &g) in g_ctx.row_mut(r).iter_mut().zip(g_mean.row(r / per)) {
                *x += g * share;
            }
        }
        encoder_backward(&self.params.context, act_fn, &ctx.cache, &g_ctx, &mut grads.context)?;

        if let Some(caches) = &self.online_regularized {
            for (cache, g) in caches.iter().zip(&grad_zc.blocks) {
                encoder_backward(&self.params.context, act_fn, cache, g, &mut grads.context)?;
            }
        }
        if let Some(caches) = &self.shared_targets {
            // d/dtarget of ‖pred − target‖² is the negated prediction gradient.
            for (cache, g) in caches.iter().zip(grad_pred) {
                encoder_backward(&self.params.context, act_fn, cache, &g.scale(-1.0), &mut grads.context)?;
            }
        }
        Ok(())
    }
}

/// Rows `start..start + count` as their own matrix.
fn row_block(m: &Matrix, start: usize, count: usize) -> Matrix {
    let c = m.cols();
    Matrix::from_vec_unchecked(count, c, m.as_slice()[start * c..(start + count) * c].to_vec())
}

/// Adds `block` onto rows `start..` of `m`.
fn add_rows(m: &mut Matrix, start: usize, block: &Matrix) {
    let c = m.cols();
    let dst = &mut m.as_mut_slice()[start * c..(start + block.rows()) * c];
    for (x, &y) in dst.iter_mut().zip(block.as_slice()) {
        *x += y;
    }
}

fn softmax_rows(a: &mut Matrix) {
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Mean over consecutive groups of `per_image` rows.
fn pool_rows(h: &Matrix, batch: usize, per_image: usize) -> Matrix {
    let d = h.cols();
    let mut out = Matrix::zeros(batch, d);
    let inv = 1.0 / per_image as f64;
    for r in 0..h.rows() {
        for (o, &x) in out.row_mut(r / per_image).iter_mut().zip(h.row(r)) {
            *o += x;
        }
    }
    out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
    out
}

/// Loss and full parameter gradient for one batch and mask set.
pub fn loss_and_gradients(
    cfg: &ModelConfig,
    params: &NetworkParams,
    images: &[Matrix],
    masks: &BlockMaskSet,
    coeffs: &VicRegCoefficients<f64>,
    mode: TargetMode,
) -> Result<(CombinedLoss<f64>, GradientSet)> {
    let mut net = Network::new(cfg, params, masks.grid_w);
    let (pred, zc) = net.forward(images, masks, mode)?;
    let mut grads = GradientSet::zeros_like(params);
    let loss = combined_loss(&pred, &zc, &params.projector, coeffs, &mut grads.projector)?;
    net.backward(&loss.grad_pred, &loss.grad_zc, &mut grads)?;
    Ok((loss, grads))
}

/// Loss value only.
pub fn loss_value(
    cfg: &ModelConfig,
    params: &NetworkParams,
    images: &[Matrix],
    masks: &BlockMaskSet,
    coeffs: &VicRegCoefficients<f64>,
    mode: TargetMode,
) -> Result<f64> {
    let mut net = Network::new(cfg, params, masks.grid_w);
    let (pred, zc) = net.forward(images, masks, mode)?;
    let mut scratch = params.projector.clone();
    Ok(combined_loss(&pred, &zc, &params.projector, coeffs, &mut scratch)?.value)
}
