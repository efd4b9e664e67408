//! Run configuration: one nested TOML document with defaults for every key.
//!
//! Precedence is command-line overrides over file values over defaults.
//! Overrides use dotted paths, e.g. `training.ae.steps=500`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::diffusion::{DenoiserConfig, DiffusionTrainConfig, Solver};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::metrics::{DEFAULT_FSCORE_THRESHOLD, DEFAULT_IOU_QUERIES, DEFAULT_SET_POINTS};
use crate::model::{ExtractConfig, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 1024, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub ae: TrainConfig,
    pub vae: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub solver: Solver,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { steps: 18, solver: Solver::Heun }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub train: DiffusionTrainConfig,
    pub sampling: SamplingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub iou_queries: usize,
    pub fscore_threshold: f64,
    /// Surface points per shape for Chamfer-based metrics.
    pub surface_points: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            iou_queries: DEFAULT_IOU_QUERIES,
            fscore_threshold: DEFAULT_FSCORE_THRESHOLD,
            surface_points: DEFAULT_SET_POINTS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub fields: FieldConfig,
    pub training: TrainingConfig,
    pub diffusion: DiffusionConfig,
    pub extract: ExtractConfig,
    pub metrics: MetricsConfig,
}

impl Config {
    pub fn model(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), decoder: self.decoder.clone(), fields: self.fields.clone() }
    }

    /// Parses a TOML document, applies `key.path=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file at `path` if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.training.ae.validate()?;
        self.training.vae.validate()?;
        let d = &self.diffusion;
        d.denoiser.validate()?;
        d.train.validate()?;
        if d.denoiser.num_latents != self.encoder.num_latents {
            return Err(Error::Config(format!(
                "diffusion.denoiser.num_latents ({}) must equal encoder.num_latents ({})",
                d.denoiser.num_latents, self.encoder.num_latents
            )));
        }
        if d.denoiser.latent_channels != self.encoder.latent_channels {
            return Err(Error::Config(format!(
                "diffusion.denoiser.latent_channels ({}) must equal encoder.latent_channels ({})",
                d.denoiser.latent_channels, self.encoder.latent_channels
            )));
        }
        if d.sampling.steps == 0 {
            return Err(Error::Config("diffusion.sampling.steps must be at least 1".into()));
        }
        let x = &self.extract;
        if x.resolution < 2 {
            return Err(Error::Config(format!("extract.resolution ({}) must be at least 2", x.resolution)));
        }
        if let Some(c) = x.coarse_resolution {
            if c < 2 || c > x.resolution {
                return Err(Error::Config(format!(
                    "extract.coarse_resolution ({c}) must lie in [2, extract.resolution ({})]",
                    x.resolution
                )));
            }
        }
        if !(x.threshold > 0.0 && x.threshold < 1.0) {
            return Err(Error::Config(format!("extract.threshold ({}) must lie in (0, 1)", x.threshold)));
        }
        if x.chunk == 0 {
            return Err(Error::Config("extract.chunk must be positive".into()));
        }
        if self.metrics.iou_queries == 0 || self.metrics.surface_points == 0 {
            return Err(Error::Config("metrics.iou_queries and metrics.surface_points must be positive".into()));
        }
        Ok(())
    }
}

/// Sets `path=value` in `doc`. The value is read as a TOML literal and falls
/// back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{k}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text, &[]).unwrap(), c);
        assert_eq!(Config::from_toml("", &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("[encoder]\nwidht = 3\n", &[]), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[bogus]\n", &[]), Err(Error::Config(_))));
        assert!(Config::from_toml("", &["training.ae.stepz=3".into()]).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let file = "[training.ae]\nsteps = 10\nbatch_size = 2\n";
        let c = Config::from_toml(file, &["training.ae.steps=25".into(), "diffusion.sampling.solver=euler".into()]).unwrap();
        assert_eq!(c.training.ae.steps, 25);
        assert_eq!(c.training.ae.batch_size, 2);
        assert_eq!(c.diffusion.sampling.solver, Solver::Euler);
        assert!(Config::from_toml("", &["no_equals".into()]).is_err());
        assert!(Config::from_toml("", &["dataset.count.x=1".into()]).is_err());
    }

    #[test]
    fn cross_field_errors_name_both_fields() {
        let cases = [
            ("encoder.num_latents=300", ["encoder.num_latents", "encoder.num_patches"]),
            ("decoder.patch_size=7", ["decoder.resolution", "decoder.patch_size"]),
            ("diffusion.denoiser.num_latents=5", ["diffusion.denoiser.num_latents", "encoder.num_latents"]),
            ("extract.coarse_resolution=256", ["extract.coarse_resolution", "extract.resolution"]),
        ];
        for (o, fields) in cases {
            let e = Config::from_toml("", &[o.to_string()]).unwrap_err().to_string();
            for f in fields {
                assert!(e.contains(f), "{o}: {e}");
            }
        }
    }
}
