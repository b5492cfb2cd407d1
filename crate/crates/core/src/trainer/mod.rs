//! AdamW training of the context encoder, predictor and projector with an
//! EMA target encoder on synthetic patch-grid images.

mod data;
mod metrics;
mod optim;
mod schedule;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{generate_synthetic, Dataset, SyntheticDatasetSpec};
pub use metrics::{MetricsLog, MetricsRecord, METRIC_NAMES};
pub use optim::{adamw_step, adamw_update, AdamHyper, AdamState, Moments};
pub use schedule::{schedule_value, ScheduleConfig, ScheduleKind};

use crate::batch::Embeddings;
use crate::diagnostics::{collapse_report_at, DiagnosticsReport, DEFAULT_COLLAPSE_THRESHOLD};
use crate::error::{Error, Result};
use crate::network::{ema_update, encode_all, loss_and_gradients, Encoder, ModelConfig, NetworkParams, TargetMode};
use crate::objective::{sample_masks, MaskingConfig};
use crate::vicreg::VicRegCoefficients;
use crate::Matrix;

/// How the target branch is produced and differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlRegime {
    /// EMA target encoder, stop-gradient on targets.
    #[default]
    StopGrad,
    /// Targets from the context encoder with gradients flowing through them.
    NoStopGrad,
    /// Randomly initialized target encoder held fixed (momentum 1).
    FrozenTarget,
}

impl ControlRegime {
    pub fn target_mode(self) -> TargetMode {
        match self {
            ControlRegime::NoStopGrad => TargetMode::Shared,
            _ => TargetMode::StopGrad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub regime: ControlRegime,
    /// Diagnostics are computed every this many steps and at the last step.
    pub diag_every: usize,
    /// Number of leading dataset images embedded for diagnostics.
    pub probe_images: usize,
    pub collapse_threshold: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            regime: ControlRegime::StopGrad,
            diag_every: 100,
            probe_images: 64,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub vicreg: VicRegCoefficients<f64>,
    pub schedules: ScheduleConfig,
    pub data: SyntheticDatasetSpec,
    pub run: RunSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate()?;
        self.vicreg.validate()?;
        self.schedules.validate()?;
        self.data.validate()?;
        if self.data.patch_dim != self.model.encoder.patch_dim {
            return Err(Error::InvalidConfig(format!(
                "data.patch_dim {} differs from model.patch_dim {}",
                self.data.patch_dim, self.model.encoder.patch_dim
            )));
        }
        let r = &self.run;
        if r.batch_size < 2 {
            return Err(Error::InvalidConfig("run: batch_size must be >= 2".into()));
        }
        if r.batch_size > self.data.num_images {
            return Err(Error::InvalidConfig("run: batch_size exceeds data.num_images".into()));
        }
        if r.diag_every == 0 {
            return Err(Error::InvalidConfig("run: diag_every must be >= 1".into()));
        }
        if r.probe_images < 2 || r.probe_images > self.data.num_images {
            return Err(Error::InvalidConfig("run: probe_images must lie in 2..=data.num_images".into()));
        }
        if !(r.collapse_threshold > 0.0 && r.collapse_threshold.is_finite()) {
            return Err(Error::InvalidConfig("run: collapse_threshold must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.schedules.beta1, beta2: self.schedules.beta2, eps: self.schedules.adam_eps }
    }
}

/// Stepwise training state. [`Trainer::run`] drives it to completion;
/// [`Trainer::step`] advances one update so callers can inspect the
/// parameters in between.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub optimizer: AdamState,
    pub log: MetricsLog,
    data: Dataset,
    probe: Vec<Matrix>,
    rng: ChaCha8Rng,
    next_step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.spec.grid_h != config.data.grid_h
            || data.spec.grid_w != config.data.grid_w
            || data.spec.patch_dim != config.model.encoder.patch_dim
            || data.len() < config.run.batch_size.max(config.run.probe_images)
        {
            return Err(Error::InvalidConfig("dataset does not match the training configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.run.seed);
        let mut params = NetworkParams::init(&config.model, &mut rng);
        if config.run.regime == ControlRegime::FrozenTarget {
            params.target = Encoder::init(&config.model.encoder, &mut rng);
        }
        let probe = data.images[..config.run.probe_images].to_vec();
        Ok(Self {
            optimizer: AdamState::new(&params),
            params,
            log: MetricsLog::new(),
            data,
            probe,
            rng,
            next_step: 0,
            config,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.schedules.total_steps()
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.total_steps()
    }

    /// Index of the next update.
    pub fn next_step(&self) -> usize {
        self.next_step
    }

    /// Embeddings of the probe images from the encoder that produces the
    /// prediction targets, one row per patch.
    pub fn probe_embeddings(&self) -> Result<Embeddings<f64>> {
        let enc = match self.config.run.regime {
            ControlRegime::NoStopGrad => &self.params.context,
            _ => &self.params.target,
        };
        Embeddings::new(encode_all(enc, &self.config.model, self.config.data.grid_w, &self.probe)?)
    }

    pub fn diagnostics(&self, step: usize) -> Result<DiagnosticsReport<f64>> {
        collapse_report_at(&self.probe_embeddings()?, self.config.run.collapse_threshold, step)
    }

    /// Performs one update and returns its log record, or `None` once all
    /// steps are done.
    pub fn step(&mut self) -> Result<Option<&MetricsRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let step = self.next_step;
        let sched = &self.config.schedules;
        let lr = sched.value(ScheduleKind::Lr, step)?;
        let wd = sched.value(ScheduleKind::Wd, step)?;
        let ema = match self.config.run.regime {
            ControlRegime::FrozenTarget => 1.0,
            _ => sched.value(ScheduleKind::Ema, step)?,
        };

        let idx = sample(&mut self.rng, self.data.len(), self.config.run.batch_size);
        let images: Vec<Matrix> = idx.iter().map(|i| self.data.images[i].clone()).collect();
        let masks = sample_masks(self.config.data.grid_h, self.config.data.grid_w, &self.config.masking, &mut self.rng)?;

        let mode = self.config.run.regime.target_mode();
        let non_finite = |e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        };
        let (loss, grads) =
            loss_and_gradients(&self.config.model, &self.params, &images, &masks, &self.config.vicreg, mode)
                .map_err(non_finite)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adamw_step(&mut self.params, &grads, &mut self.optimizer, lr, wd, &self.config.adam())?;
        ema_update(&mut self.params.target, &self.params.context, ema)?;
        if !self.params.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }

        let mut rec = MetricsRecord {
            step,
            loss: loss.value,
            jepa: loss.jepa,
            vicreg: loss.vicreg,
            vicreg_sim: loss.vicreg_sim,
            vicreg_std: loss.vicreg_std,
            vicreg_cov: loss.vicreg_cov,
            lr,
            wd,
            ema,
            min_std: None,
            mean_std: None,
            offdiag_cov: None,
            effective_rank: None,
            collapsed: None,
        };
        let last = step + 1 == self.total_steps();
        if step % self.config.run.diag_every == 0 || last {
            rec.attach(&self.diagnostics(step).map_err(non_finite)?);
        }
        self.log.push(rec)?;
        self.next_step += 1;
        Ok(self.log.last())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub params: NetworkParams,
    pub report: DiagnosticsReport<f64>,
}

/// Trains to completion on `data`.
pub fn train(config: &TrainConfig, data: Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(*config, data)?;
    t.run()?;
    let report = t.diagnostics(t.total_steps() - 1)?;
    Ok(TrainOutcome { log: t.log, params: t.params, report })
}
