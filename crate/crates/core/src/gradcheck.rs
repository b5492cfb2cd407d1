//! Central finite-difference checks of every analytic gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch::Embeddings;
use crate::error::Result;
use crate::network::{loss_and_gradients, loss_value, GradientSet, ModelConfig, NetworkParams, ParamGroup, TargetMode};
use crate::objective::{combined_loss, jepa_loss, sample_masks, BlockMaskSet, MaskingConfig, PatchPrediction};
use crate::vicreg::{
    covariance_term, cross_block_vicreg, invariance_term, variance_term, vicreg_loss, BlockEmbeddings,
    VicRegCoefficients,
};
use crate::Matrix;

pub const FD_STEP: f64 = 1e-5;

pub const TOLERANCE: f64 = 1e-6;

/// Allowance, in units of machine epsilon, for the rounding error in one loss
/// evaluation.
pub const ROUNDING_ULPS: f64 = 16.0;

/// Smallest denominator used by [`relative_error`] for a loss of size `loss`.
///
/// A central difference carries a rounding error of about
/// `ROUNDING_ULPS · ε · |L| / h`. Entries whose size is below that error divided
/// by [`TOLERANCE`] are compared against this floor instead of their own
/// magnitude, so the check asks for `TOLERANCE` relative agreement or agreement
/// to within the rounding error of the difference quotient.
pub fn denominator_floor(loss: f64) -> f64 {
    ROUNDING_ULPS * f64::EPSILON * loss.abs().max(1.0) / (FD_STEP * TOLERANCE)
}

/// `|a − n| / max(|a|, |n|, floor(L))`.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(denominator_floor(loss))
}

/// `(f(x+h) − f(x−h)) / 2h` for a function of one perturbed entry.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Worst entry of one checked component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    /// Array and flat index of the worst entry.
    pub worst: String,
    pub entries: usize,
}

impl ComponentReport {
    fn new(component: impl Into<String>) -> Self {
        Self { component: component.into(), max_rel_error: 0.0, worst: String::new(), entries: 0 }
    }

    fn record(&mut self, location: impl FnOnce() -> String, analytic: f64, numeric: f64, loss: f64) {
        let e = relative_error(analytic, numeric, loss);
        self.entries += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = location();
        }
    }

    fn merge(&mut self, other: ComponentReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.entries += other.entries;
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Corrupts one analytic gradient entry before comparison; used as a negative
/// control for the checker itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// Exact array name, e.g. `predictor.fc1.weight`.
    pub array: String,
    pub delta: f64,
}

fn check_matrix(
    report: &mut ComponentReport,
    label: &str,
    x: &Matrix,
    analytic: &Matrix,
    mut loss: impl FnMut(&Matrix) -> Result<f64>,
) -> Result<()> {
    let value = loss(x)?;
    let mut probe = x.clone();
    for k in 0..x.as_slice().len() {
        let x0 = x.as_slice()[k];
        let numeric = central_difference(
            |h| {
                probe.as_mut_slice()[k] = x0 + h;
                loss(&probe)
            },
            FD_STEP,
        )?;
        probe.as_mut_slice()[k] = x0;
        report.record(|| format!("{label}[{k}]"), analytic.as_slice()[k], numeric, value);
    }
    Ok(())
}

fn random_batch<R: Rng>(rng: &mut R, n: usize, d: usize) -> Matrix {
    // per-dimension spreads straddle the hinge so both branches get exercised
    let spread: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..2.5)).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_fn(n, d, |_, j| shift[j] + spread[j] * rng.random_range(-1.7..1.7))
}

fn random_coeffs<R: Rng>(rng: &mut R) -> VicRegCoefficients<f64> {
    VicRegCoefficients {
        beta_sim: rng.random_range(0.5..30.0),
        beta_std: rng.random_range(0.5..30.0),
        beta_cov: rng.random_range(0.5..3.0),
        beta_vicreg: rng.random_range(0.001..0.1),
        gamma: 1.0,
        epsilon: 1e-4,
    }
}

fn random_blocks<R: Rng>(rng: &mut R, batch: usize, sizes: &[usize], d: usize) -> BlockEmbeddings<f64> {
    BlockEmbeddings::new(batch, sizes.iter().map(|&p| random_batch(rng, batch * p, d)).collect())
        .expect("finite random blocks")
}

/// Checks the standalone loss terms on one random instance per term.
pub fn check_loss_terms(seed: u64) -> Result<Vec<ComponentReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let z = random_batch(&mut rng, 16, 8);
    let mut r = ComponentReport::new("variance");
    let l = variance_term(&Embeddings::new(z.clone())?, 1.0, 1e-4)?;
    check_matrix(&mut r, "z", &z, l.grad(), |p| Ok(variance_term(&Embeddings::new(p.clone())?, 1.0, 1e-4)?.value))?;
    out.push(r);

    let mut r = ComponentReport::new("covariance");
    let l = covariance_term(&Embeddings::new(z.clone())?)?;
    check_matrix(&mut r, "z", &z, l.grad(), |p| Ok(covariance_term(&Embeddings::new(p.clone())?)?.value))?;
    out.push(r);

    let a = random_batch(&mut rng, 12, 6);
    let b = random_batch(&mut rng, 12, 6);
    let ea = Embeddings::new(a.clone())?;
    let eb = Embeddings::new(b.clone())?;
    let mut r = ComponentReport::new("invariance");
    let l = invariance_term(&ea, &eb)?;
    check_matrix(&mut r, "a", &a, &l.grads[0], |p| Ok(invariance_term(&Embeddings::new(p.clone())?, &eb)?.value))?;
    check_matrix(&mut r, "b", &b, &l.grads[1], |p| Ok(invariance_term(&ea, &Embeddings::new(p.clone())?)?.value))?;
    out.push(r);

    let coeffs = random_coeffs(&mut rng);
    let mut r = ComponentReport::new("vicreg");
    let l = vicreg_loss(&ea, &eb, &coeffs)?.total;
    check_matrix(&mut r, "a", &a, &l.grads[0], |p| Ok(vicreg_loss(&Embeddings::new(p.clone())?, &eb, &coeffs)?.total.value))?;
    check_matrix(&mut r, "b", &b, &l.grads[1], |p| Ok(vicreg_loss(&ea, &Embeddings::new(p.clone())?, &coeffs)?.total.value))?;
    out.push(r);

    let sizes = [3, 2, 4];
    let zc = random_blocks(&mut rng, 6, &sizes, 5);
    let mut r = ComponentReport::new("cross-block");
    let l = cross_block_vicreg(&zc, &crate::vicreg::IdentityProjector, &coeffs, &mut ())?;
    for i in 0..zc.num_blocks() {
        check_matrix(&mut r, &format!("block{i}"), &zc.blocks[i], &l.grad.blocks[i], |p| {
            let mut probe = zc.clone();
            probe.blocks[i] = p.clone();
            Ok(cross_block_vicreg(&probe, &crate::vicreg::IdentityProjector, &coeffs, &mut ())?.value)
        })?;
    }
    out.push(r);

    let pred = random_blocks(&mut rng, 3, &sizes, 5);
    let target = random_blocks(&mut rng, 3, &sizes, 5);
    let pp = PatchPrediction::new(pred.clone(), target.clone())?;
    let mut r = ComponentReport::new("jepa");
    let l = jepa_loss(&pp)?;
    for i in 0..sizes.len() {
        check_matrix(&mut r, &format!("pred{i}"), &pred.blocks[i], &l.grads[i], |p| {
            let mut probe = pp.clone();
            probe.predicted.blocks[i] = p.clone();
            Ok(jepa_loss(&probe)?.value)
        })?;
    }
    out.push(r);

    let zc = random_blocks(&mut rng, 3, &sizes, 5);
    let mut r = ComponentReport::new("combined");
    let l = combined_loss(&pp, &zc, &crate::vicreg::IdentityProjector, &coeffs, &mut ())?;
    for i in 0..sizes.len() {
        check_matrix(&mut r, &format!("pred{i}"), &pred.blocks[i], &l.grad_pred[i], |p| {
            let mut probe = pp.clone();
            probe.predicted.blocks[i] = p.clone();
            Ok(combined_loss(&probe, &zc, &crate::vicreg::IdentityProjector, &coeffs, &mut ())?.value)
        })?;
        check_matrix(&mut r, &format!("zc{i}"), &zc.blocks[i], &l.grad_zc.blocks[i], |p| {
            let mut probe = zc.clone();
            probe.blocks[i] = p.clone();
            Ok(combined_loss(&pp, &probe, &crate::vicreg::IdentityProjector, &coeffs, &mut ())?.value)
        })?;
    }
    out.push(r);
    Ok(out)
}

/// A random model instance for the full-network check.
#[derive(Debug, Clone)]
pub struct NetworkProblem {
    pub cfg: ModelConfig,
    pub params: NetworkParams,
    pub images: Vec<Matrix>,
    pub masks: BlockMaskSet,
    pub coeffs: VicRegCoefficients<f64>,
    pub mode: TargetMode,
}

impl NetworkProblem {
    /// `batch` images on a `grid × grid` patch grid with embedding size `d`.
    /// Target encoder, mask token and every other array are randomized so no
    /// gradient is trivially zero; the regularizer weight is raised so its
    /// path is visible next to the prediction loss.
    pub fn random(cfg: ModelConfig, batch: usize, grid: usize, seed: u64, mode: TargetMode) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetworkParams::init(&cfg, &mut rng);
        params.target = NetworkParams::init(&cfg, &mut rng).context;
        for t in params.mask_token.iter_mut() {
            *t = rng.random_range(-0.5..0.5);
        }
        for v in params.arrays_mut() {
            if v.shape.len() == 1 {
                v.data.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let p = grid * grid;
        let images = (0..batch)
            .map(|_| Matrix::from_fn(p, cfg.encoder.patch_dim, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let masks = sample_masks(grid, grid, &MaskingConfig::default(), &mut rng)?;
        let coeffs = VicRegCoefficients { beta_vicreg: 0.05, ..VicRegCoefficients::default() };
        Ok(Self { cfg, params, images, masks, coeffs, mode })
    }

    pub fn loss(&self, params: &NetworkParams) -> Result<f64> {
        loss_value(&self.cfg, params, &self.images, &self.masks, &self.coeffs, self.mode)
    }

    pub fn gradients(&self) -> Result<GradientSet> {
        Ok(loss_and_gradients(&self.cfg, &self.params, &self.images, &self.masks, &self.coeffs, self.mode)?.1)
    }
}

/// Compares backpropagation with central differences for every parameter
/// array except the target encoder, which must have an exactly zero gradient
/// (reported as its own component). At most `per_array` entries of each
/// array are probed, chosen at random; `None` probes all of them.
pub fn check_network(
    problem: &NetworkProblem,
    per_array: Option<usize>,
    perturb: Option<&Perturbation>,
    seed: u64,
) -> Result<Vec<ComponentReport>> {
    let (loss, mut grads) =
        loss_and_gradients(&problem.cfg, &problem.params, &problem.images, &problem.masks, &problem.coeffs, problem.mode)?;
    let value = loss.value;
    if let Some(p) = perturb {
        if let Some(v) = grads.arrays_mut().into_iter().find(|v| v.name == p.array) {
            v.data[0] += p.delta;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_group: Vec<(ParamGroup, ComponentReport)> = Vec::new();
    let mut target_zero = ComponentReport::new("target (stop-grad)");

    let analytic: Vec<(String, Vec<f64>)> = grads.arrays().into_iter().map(|a| (a.name, a.data.to_vec())).collect();
    for (idx, (name, g)) in analytic.iter().enumerate() {
        let group = ParamGroup::of(name);
        if group == ParamGroup::Target {
            for (k, &v) in g.iter().enumerate() {
                target_zero.record(|| format!("{name}[{k}]"), v, 0.0, value);
                if v != 0.0 {
                    target_zero.max_rel_error = f64::INFINITY;
                }
            }
            continue;
        }
        let mut picks: Vec<usize> = match per_array {
            Some(m) if m < g.len() => sample(&mut rng, g.len(), m).into_vec(),
            _ => (0..g.len()).collect(),
        };
        if perturb.is_some_and(|p| &p.array == name) && !picks.contains(&0) {
            picks.push(0);
        }
        let mut report = ComponentReport::new(name.clone());
        let mut probe = problem.params.clone();
        for k in picks {
            let x0 = problem.params.arrays()[idx].data[k];
            let numeric = central_difference(
                |h| {
                    probe.arrays_mut()[idx].data[k] = x0 + h;
                    problem.loss(&probe)
                },
                FD_STEP,
            )?;
            probe.arrays_mut()[idx].data[k] = x0;
            report.record(|| format!("{name}[{k}]"), g[k], numeric, value);
        }
        match by_group.iter_mut().find(|(gr, _)| *gr == group) {
            Some((_, r)) => r.merge(report),
            None => {
                let label = match group {
                    ParamGroup::Context => "context encoder",
                    ParamGroup::Predictor => "predictor",
                    ParamGroup::Projector => "projector",
                    _ => "mask token",
                };
                let mut r = ComponentReport::new(label);
                r.merge(report);
                by_group.push((group, r));
            }
        }
    }
    let mut out: Vec<ComponentReport> = by_group.into_iter().map(|(_, r)| r).collect();
    out.push(target_zero);
    Ok(out)
}

/// Entries probed per parameter array by [`gradient_suite`].
pub const PROBES_PER_ARRAY: usize = 16;

/// Loss-term checks and full-network checks under both target modes for
/// seeds `seed..seed + trials`, merged per component (worst entry kept).
/// The network instances use `cfg` on a `grid × grid` patch grid with two
/// images.
pub fn gradient_suite(
    cfg: &ModelConfig,
    grid: usize,
    seed: u64,
    trials: usize,
    perturb: Option<&Perturbation>,
) -> Result<Vec<ComponentReport>> {
    let mut merged: Vec<ComponentReport> = Vec::new();
    let mut add = |reports: Vec<ComponentReport>| {
        for r in reports {
            match merged.iter_mut().find(|m| m.component == r.component) {
                Some(m) => m.merge(r),
                None => merged.push(r),
            }
        }
    };
    for s in seed..seed + trials as u64 {
        add(check_loss_terms(s)?);
        for mode in [TargetMode::StopGrad, TargetMode::Shared] {
            let problem = NetworkProblem::random(*cfg, 2, grid, s, mode)?;
            add(check_network(&problem, Some(PROBES_PER_ARRAY), perturb, s)?);
        }
    }
    Ok(merged)
}

