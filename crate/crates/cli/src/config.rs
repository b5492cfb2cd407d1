//! Run configuration files: `[section]` headers with flat `key = value` lines.

use std::path::Path;

use cjepa_core::network::{Activation, ContextPool, EncoderConfig, ModelConfig, PredictorKind, VicregSource};
use cjepa_core::objective::MaskingConfig;
use cjepa_core::trainer::{RunSettings, ScheduleConfig, SyntheticDatasetSpec, TrainConfig};
use cjepa_core::vicreg::VicRegCoefficients;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch_dim: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub pos_embed: bool,
    pub predictor: PredictorKind,
    pub context_pool: ContextPool,
    pub mask_pos_scale: f64,
    pub vicreg_source: VicregSource,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelConfig::default().into()
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(m: ModelConfig) -> Self {
        let e = m.encoder;
        Self {
            patch_dim: e.patch_dim,
            embed_dim: e.embed_dim,
            num_layers: e.num_layers,
            hidden_dim: e.hidden_dim,
            activation: e.activation,
            pos_embed: e.pos_embed,
            predictor: m.predictor,
            context_pool: m.context_pool,
            mask_pos_scale: m.mask_pos_scale,
            vicreg_source: m.vicreg_source,
        }
    }
}

impl From<ModelSection> for ModelConfig {
    fn from(s: ModelSection) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                patch_dim: s.patch_dim,
                embed_dim: s.embed_dim,
                num_layers: s.num_layers,
                hidden_dim: s.hidden_dim,
                activation: s.activation,
                pos_embed: s.pos_embed,
            },
            predictor: s.predictor,
            context_pool: s.context_pool,
            mask_pos_scale: s.mask_pos_scale,
            vicreg_source: s.vicreg_source,
        }
    }
}

/// The dataset section; the patch size is taken from `[model]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_images: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_latent_factors: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        SyntheticDatasetSpec::default().into()
    }
}

impl From<SyntheticDatasetSpec> for DataSection {
    fn from(d: SyntheticDatasetSpec) -> Self {
        Self {
            num_images: d.num_images,
            grid_h: d.grid_h,
            grid_w: d.grid_w,
            num_latent_factors: d.num_latent_factors,
            noise_std: d.noise_std,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub masking: MaskingConfig,
    pub vicreg: VicRegCoefficients<f64>,
    pub schedules: ScheduleConfig,
    pub data: DataSection,
    pub run: RunSettings,
}

impl From<RunConfigFile> for TrainConfig {
    fn from(f: RunConfigFile) -> Self {
        let d = f.data;
        TrainConfig {
            model: f.model.into(),
            masking: f.masking,
            vicreg: f.vicreg,
            schedules: f.schedules,
            data: SyntheticDatasetSpec {
                num_images: d.num_images,
                grid_h: d.grid_h,
                grid_w: d.grid_w,
                patch_dim: f.model.patch_dim,
                num_latent_factors: d.num_latent_factors,
                noise_std: d.noise_std,
                seed: d.seed,
            },
            run: f.run,
        }
    }
}

impl From<TrainConfig> for RunConfigFile {
    fn from(c: TrainConfig) -> Self {
        Self {
            model: c.model.into(),
            masking: c.masking,
            vicreg: c.vicreg,
            schedules: c.schedules,
            data: c.data.into(),
            run: c.run,
        }
    }
}

impl RunConfigFile {
    /// Parses a document, applies `section.key=value` overrides and checks
    /// the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let file: RunConfigFile = table.try_into().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        TrainConfig::from(file).validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(file)
    }

    /// Reads `path` (defaults only when `None`) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        (*self).into()
    }
}

/// `section.key=value`; the value is read as a TOML value, or as a bare
/// string when it does not parse as one (`run.regime=no-stop-grad`).
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let usage = || CliError::Usage(format!("--set expects section.key=value, got {spec:?}"));
    let (path, raw) = spec.split_once('=').ok_or_else(usage)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(usage)?;
    if section.is_empty() || key.is_empty() {
        return Err(usage());
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(CliError::Usage(format!("config: {section} is not a section"))),
    }
}
