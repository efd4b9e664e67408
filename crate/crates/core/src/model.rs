//! The full shape autoencoder: encoder, KL block, latent decoder, triplane
//! decoder and occupancy MLP, sharing one parameter store.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderOutput, LatentDecoder, Triplane, TriplaneDecoder};
use crate::encoder::{Encoder, EncoderConfig, KlBlock};
use crate::error::{Error, Result};
use crate::fields::{extract_mesh, FieldConfig, FieldMlp, OccupancyField, OccupancyGrid};
use crate::geometry::{Mesh, PointCloud};
use crate::nn::ParamStore;

/// Parameter prefixes trained in stage one and frozen in stage two.
pub const AUTOENCODER_PREFIXES: [&str; 3] = ["encoder", "decoder", "field"];
/// Parameter prefixes trained in stage two.
pub const COMPRESSION_PREFIXES: [&str; 2] = ["kl", "latent_decoder"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Autoencoder without channel compression.
    Ae,
    /// KL block and latent decoder on top of the frozen autoencoder.
    Vae,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::Vae => "vae",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Stage::Ae),
            "vae" => Ok(Stage::Vae),
            _ => Err(Error::Config(format!("unknown stage `{s}` (expected ae or vae)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub fields: FieldConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.width != self.decoder.width {
            return Err(Error::Config(format!(
                "decoder.width ({}) must equal encoder.width ({})",
                self.decoder.width, self.encoder.width
            )));
        }
        if self.fields.hidden == 0 {
            return Err(Error::Config("fields.hidden must be positive".into()));
        }
        Ok(())
    }

    /// A very small model that runs in milliseconds, for tests and examples.
    pub fn tiny() -> Self {
        let mut c = ModelConfig::overfit();
        c.encoder.num_points = 64;
        c.encoder.num_patches = 16;
        c.encoder.num_latents = 4;
        c.encoder.width = 16;
        c.encoder.latent_channels = 4;
        c.encoder.num_blocks = 1;
        c.decoder.width = 16;
        c.decoder.resolution = 8;
        c.decoder.patch_size = 4;
        c.decoder.triplane_channels = 4;
        c
    }

    /// Compact desk-scale model used by the overfit experiments.
    pub fn overfit() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                num_points: 256,
                num_patches: 64,
                num_latents: 16,
                width: 128,
                latent_channels: 32,
                num_blocks: 2,
                num_heads: 4,
                ..Default::default()
            },
            decoder: DecoderConfig {
                resolution: 32,
                patch_size: 8,
                width: 128,
                triplane_channels: 32,
                num_layers: 2,
                latent_layers: 1,
                num_heads: 4,
                ..Default::default()
            },
            fields: FieldConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapeVae {
    cfg: ModelConfig,
    dtype: DType,
    encoder: Encoder,
    kl: KlBlock,
    latent_decoder: LatentDecoder,
    decoder: TriplaneDecoder,
    field: FieldMlp,
}

impl ShapeVae {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        Ok(ShapeVae {
            cfg: cfg.clone(),
            dtype: store.dtype(),
            encoder: Encoder::new(&root.pp("encoder"), &cfg.encoder)?,
            kl: KlBlock::new(&root.pp("kl"), cfg.encoder.width, cfg.encoder.latent_channels)?,
            latent_decoder: LatentDecoder::new(&root.pp("latent_decoder"), cfg.encoder.latent_channels, &cfg.decoder)?,
            decoder: TriplaneDecoder::new(&root.pp("decoder"), &cfg.decoder)?,
            field: FieldMlp::new(&root.pp("field"), cfg.decoder.triplane_channels, &cfg.fields)?,
        })
    }

    /// Builds the model with the freeze set of `stage` applied to `store`.
    pub fn for_stage(store: &ParamStore, cfg: &ModelConfig, stage: Stage) -> Result<Self> {
        store.unfreeze_all();
        if stage == Stage::Vae {
            for p in AUTOENCODER_PREFIXES {
                store.freeze(p);
            }
        }
        Self::new(store, cfg)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn kl(&self) -> &KlBlock {
        &self.kl
    }

    pub fn latent_decoder(&self) -> &LatentDecoder {
        &self.latent_decoder
    }

    pub fn decoder(&self) -> &TriplaneDecoder {
        &self.decoder
    }

    pub fn field_mlp(&self) -> &FieldMlp {
        &self.field
    }

    /// Compact features `F`, `(batch, M, C)`.
    pub fn encode(&self, clouds: &[PointCloud], seed: u64) -> Result<Tensor> {
        self.encoder.encode(clouds, seed)
    }

    /// Latent mean `(batch, M, D)` used for deterministic evaluation.
    pub fn latent_mean(&self, clouds: &[PointCloud], seed: u64) -> Result<Tensor> {
        Ok(self.kl.forward(&self.encode(clouds, seed)?)?.0)
    }

    /// Decoder input for a stage: `F` itself for the autoencoder, or the
    /// latent decoder applied to `mu` (zero sampling noise) for the VAE.
    pub fn decoder_input(&self, clouds: &[PointCloud], stage: Stage, seed: u64) -> Result<Tensor> {
        let f = self.encode(clouds, seed)?;
        match stage {
            Stage::Ae => Ok(f),
            Stage::Vae => self.latent_decoder.forward(&self.kl.forward(&f)?.0),
        }
    }

    pub fn reconstruct(&self, clouds: &[PointCloud], stage: Stage, seed: u64) -> Result<DecoderOutput> {
        self.decoder.forward(&self.decoder_input(clouds, stage, seed)?)
    }

    /// Decodes latent vectors `(batch, M, D)` into triplanes.
    pub fn decode_latents(&self, z: &Tensor) -> Result<DecoderOutput> {
        self.decoder.forward(&self.latent_decoder.forward(z)?)
    }

    pub fn occupancy_field(&self, triplane: &Triplane, index: usize) -> Result<OccupancyField> {
        OccupancyField::new(&self.field, &triplane.sample(index)?)
    }
}

/// Grid settings for surface extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub resolution: usize,
    /// Coarse resolution for two-level evaluation; `None` evaluates densely.
    pub coarse_resolution: Option<usize>,
    pub dilation: usize,
    pub threshold: f64,
    pub chunk: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { resolution: 128, coarse_resolution: None, dilation: 1, threshold: 0.5, chunk: 65536 }
    }
}

impl ExtractConfig {
    pub fn grid(&self, field: &OccupancyField) -> Result<OccupancyGrid> {
        match self.coarse_resolution {
            None => OccupancyGrid::dense(field, self.resolution, self.chunk),
            Some(c) => Ok(OccupancyGrid::multires(field, c, self.resolution, self.dilation, self.threshold)?.0),
        }
    }

    pub fn mesh(&self, field: &OccupancyField) -> Result<Mesh> {
        extract_mesh(&self.grid(field)?, self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProceduralShape;
    use candle_core::DType;

    #[test]
    fn widths_must_agree() {
        let mut c = ModelConfig::tiny();
        c.decoder.width = 32;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("decoder.width") && e.contains("encoder.width"));
        assert!("gan".parse::<Stage>().is_err());
    }

    #[test]
    fn end_to_end_shapes() {
        let s = ParamStore::new(DType::F32, 0);
        let m = ShapeVae::new(&s, &ModelConfig::tiny()).unwrap();
        let cloud = ProceduralShape::sphere(0.5).sample_surface(64, 0).unwrap();
        for stage in [Stage::Ae, Stage::Vae] {
            let out = m.reconstruct(&[cloud.clone()], stage, 0).unwrap();
            assert_eq!(out.triplane.planes.dims(), &[1, 3, 8, 8, 4]);
        }
        let field = m.occupancy_field(&m.reconstruct(&[cloud], Stage::Ae, 0).unwrap().triplane, 0).unwrap();
        let cfg = ExtractConfig { resolution: 8, ..Default::default() };
        assert_eq!(cfg.grid(&field).unwrap().values.len(), 512);
    }

    #[test]
    fn vae_stage_freezes_autoencoder() {
        let s = ParamStore::new(DType::F32, 0);
        let _ = ShapeVae::for_stage(&s, &ModelConfig::tiny(), Stage::Vae).unwrap();
        assert!(s.is_frozen("encoder.embed.frequencies"));
        assert!(s.is_frozen("field.out.bias"));
        assert!(!s.is_frozen("kl.mean.bias"));
        let _ = ShapeVae::for_stage(&s, &ModelConfig::tiny(), Stage::Ae).unwrap();
        assert!(!s.is_frozen("encoder.embed.frequencies"));
    }
}
