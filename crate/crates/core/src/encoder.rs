//! Point-cloud encoder: shared positional embedding, progressive encoder
//! blocks over point features `G`, patch features `H` and compact vectors
//! `F`, a final projection from `G` into `F`, and the KL block.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{farthest_point_sample, PointCloud};
use crate::nn::{gather_rows, points_tensor, CrossAttentionBlock, Init, Linear, Params, SelfAttentionBlock};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Patch and latent anchors are farthest-point samples of the input.
    #[default]
    InputDependent,
    /// Anchors are learned coordinates shared by every input.
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Input points per cloud (N).
    pub num_points: usize,
    /// Point patches (L).
    pub num_patches: usize,
    /// Latent vectors (M).
    pub num_latents: usize,
    /// Feature width (C).
    pub width: usize,
    /// Latent channels after the KL block (D).
    pub latent_channels: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub position_mode: PositionMode,
    /// Number of learnable frequencies in the positional embedding.
    pub embed_frequencies: usize,
    /// Standard deviation of the initial frequencies, in cycles per unit.
    pub frequency_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_points: 2048,
            num_patches: 256,
            num_latents: 32,
            width: 256,
            latent_channels: 32,
            num_blocks: 4,
            num_heads: 8,
            mlp_ratio: 4,
            position_mode: PositionMode::InputDependent,
            embed_frequencies: 24,
            frequency_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    /// Full-size setting: C=512, L=512, M=64.
    pub fn full_scale() -> Self {
        EncoderConfig {
            num_patches: 512,
            num_latents: 64,
            width: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_latents == 0 {
            return fail("encoder.num_latents must be at least 1".into());
        }
        if self.num_latents > self.num_patches {
            return fail(format!(
                "encoder.num_latents ({}) must not exceed encoder.num_patches ({})",
                self.num_latents, self.num_patches
            ));
        }
        if self.num_patches > self.num_points {
            return fail(format!(
                "encoder.num_patches ({}) must not exceed encoder.num_points ({})",
                self.num_patches, self.num_points
            ));
        }
        if self.latent_channels == 0 || self.latent_channels >= self.width {
            return fail(format!(
                "encoder.latent_channels ({}) must be positive and below encoder.width ({})",
                self.latent_channels, self.width
            ));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return fail(format!(
                "encoder.width ({}) must be divisible by encoder.num_heads ({})",
                self.width, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.embed_frequencies == 0 || self.mlp_ratio == 0 {
            return fail("encoder.num_blocks, embed_frequencies and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Scalars per latent set, `M * D`.
    pub fn latent_size(&self) -> usize {
        self.num_latents * self.latent_channels
    }
}

/// Random Fourier features with learnable frequencies followed by a linear
/// layer. One instance embeds the positions of `G`, `H` and `F`.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    frequencies: Tensor,
    proj: Linear,
    width: usize,
}

impl PositionalEmbedding {
    pub fn new(p: &Params, num_frequencies: usize, scale: f64, width: usize) -> Result<Self> {
        Ok(PositionalEmbedding {
            frequencies: p.get("frequencies", &[3, num_frequencies], Init::Normal(scale))?,
            proj: Linear::new(&p.pp("proj"), 2 * num_frequencies + 3, width)?,
            width,
        })
    }

    /// `(batch, P, 3)` positions to `(batch, P, width)` features.
    pub fn forward(&self, positions: &Tensor) -> Result<Tensor> {
        let (b, n, _) = positions.dims3()?;
        if n == 0 {
            return Ok(Tensor::zeros((b, 0, self.width), positions.dtype(), positions.device())?);
        }
        let phase = (positions
            .reshape((b * n, 3))?
            .matmul(&self.frequencies)?
            * (2.0 * std::f64::consts::PI))?
            .reshape((b, n, ()))?;
        let feats = Tensor::cat(&[phase.sin()?, phase.cos()?, positions.clone()], D::Minus1)?;
        self.proj.forward(&feats)
    }
}

/// One progressive block: `G -> H -> F -> G`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    patch_cross: CrossAttentionBlock,
    patch_self: Vec<SelfAttentionBlock>,
    cls: Tensor,
    latent_cross: CrossAttentionBlock,
    latent_self: SelfAttentionBlock,
    point_cross: CrossAttentionBlock,
    width: usize,
}

impl EncoderBlock {
    pub fn new(p: &Params, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(EncoderBlock {
            patch_cross: CrossAttentionBlock::new(&p.pp("patch_cross"), width, heads, mlp_ratio)?,
            patch_self: (0..3)
                .map(|i| SelfAttentionBlock::new(&p.pp(&format!("patch_self.{i}")), width, heads, mlp_ratio))
                .collect::<Result<_>>()?,
            cls: p.get("cls", &[1, 1, width], Init::Normal(0.02))?,
            latent_cross: CrossAttentionBlock::new(&p.pp("latent_cross"), width, heads, mlp_ratio)?,
            latent_self: SelfAttentionBlock::new(&p.pp("latent_self"), width, heads, mlp_ratio)?,
            point_cross: CrossAttentionBlock::new(&p.pp("point_cross"), width, heads, mlp_ratio)?,
            width,
        })
    }

    /// Returns `(G', H', F')`. The CLS token joins `H` only inside the
    /// self-attention stack.
    pub fn forward(&self, g: &Tensor, h: &Tensor, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        for (name, t) in [("G", g), ("H", h), ("F", f)] {
            let w = t.dims().last().copied().unwrap_or(0);
            if t.rank() != 3 || w != self.width {
                return Err(invalid!("{name} has shape {:?}, expected width {}", t.dims(), self.width));
            }
        }
        let (b, l, c) = h.dims3()?;
        let h = self.patch_cross.forward(h, g)?;
        let mut hc = Tensor::cat(&[h, self.cls.broadcast_as((b, 1, c))?.contiguous()?], 1)?;
        for blk in &self.patch_self {
            hc = blk.forward(&hc)?;
        }
        let h = hc.narrow(1, 0, l)?;
        let f = self.latent_self.forward(&self.latent_cross.forward(f, &h)?)?;
        let g = self.point_cross.forward(g, &f)?;
        Ok((g, h, f))
    }
}

/// FPS anchor indices for one cloud. Latent anchors are the first `M` patch
/// anchors, which is exactly FPS with `k = M` from the same start.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub patches: Vec<usize>,
    pub latents: Vec<usize>,
}

impl Anchors {
    /// Same anchors after the cloud rows are reordered so that new row `i`
    /// holds old row `order[i]`.
    pub fn remapped(&self, order: &[usize]) -> Anchors {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        Anchors {
            patches: self.patches.iter().map(|&i| inverse[i]).collect(),
            latents: self.latents.iter().map(|&i| inverse[i]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: PositionalEmbedding,
    blocks: Vec<EncoderBlock>,
    project: CrossAttentionBlock,
    learned_positions: Option<(Tensor, Tensor)>,
}

impl Encoder {
    pub fn new(p: &Params, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let learned_positions = match cfg.position_mode {
            PositionMode::InputDependent => None,
            PositionMode::Learnable => Some((
                p.get("patch_positions", &[cfg.num_patches, 3], Init::Uniform(0.9))?,
                p.get("latent_positions", &[cfg.num_latents, 3], Init::Uniform(0.9))?,
            )),
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            embed: PositionalEmbedding::new(&p.pp("embed"), cfg.embed_frequencies, cfg.frequency_scale, c)?,
            blocks: (0..cfg.num_blocks)
                .map(|i| EncoderBlock::new(&p.pp(&format!("blocks.{i}")), c, cfg.num_heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            project: CrossAttentionBlock::new(&p.pp("project"), c, cfg.num_heads, cfg.mlp_ratio)?,
            learned_positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &PositionalEmbedding {
        &self.embed
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    pub fn anchors(&self, cloud: &PointCloud, seed: u64) -> Result<Anchors> {
        let n = cloud.len();
        if n < self.cfg.num_patches {
            return Err(invalid!(
                "cloud has {n} points but the encoder needs at least {} (num_patches)",
                self.cfg.num_patches
            ));
        }
        let patches = farthest_point_sample(cloud.points(), self.cfg.num_patches, rng::derive_seed(seed, &[rng::name_tag("anchors")]))?;
        let latents = patches[..self.cfg.num_latents].to_vec();
        Ok(Anchors { patches, latents })
    }

    /// Encodes a batch of equally sized clouds into `(batch, M, C)` features.
    pub fn encode(&self, clouds: &[PointCloud], seed: u64) -> Result<Tensor> {
        let anchors = clouds
            .iter()
            .map(|c| self.anchors(c, seed))
            .collect::<Result<Vec<_>>>()?;
        let points = self.clouds_tensor(clouds)?;
        self.encode_with_anchors(&points, &anchors)
    }

    pub fn clouds_tensor(&self, clouds: &[PointCloud]) -> Result<Tensor> {
        let n = clouds.first().map_or(0, |c| c.len());
        if clouds.is_empty() || clouds.iter().any(|c| c.len() != n) {
            return Err(invalid!("encode needs a non-empty batch of equally sized clouds"));
        }
        let t = clouds
            .iter()
            .map(|c| points_tensor(c.points(), self.embed.frequencies.dtype(), self.embed.frequencies.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&t, 0)?)
    }

    /// Encodes `(batch, N, 3)` coordinates with explicit anchors. Gradients
    /// flow back into the coordinates, anchors included.
    pub fn encode_with_anchors(&self, points: &Tensor, anchors: &[Anchors]) -> Result<Tensor> {
        let (b, n, _) = points.dims3()?;
        if n < self.cfg.num_patches {
            return Err(invalid!("cloud has {n} points, fewer than num_patches {}", self.cfg.num_patches));
        }
        let (pos_h, pos_f) = match &self.learned_positions {
            None => {
                if anchors.len() != b {
                    return Err(invalid!("{} anchor sets for a batch of {b}", anchors.len()));
                }
                let ph: Vec<Vec<usize>> = anchors.iter().map(|a| a.patches.clone()).collect();
                let pf: Vec<Vec<usize>> = anchors.iter().map(|a| a.latents.clone()).collect();
                (gather_rows(points, &ph)?, gather_rows(points, &pf)?)
            }
            Some((ph, pf)) => (
                ph.unsqueeze(0)?.broadcast_as((b, self.cfg.num_patches, 3))?.contiguous()?,
                pf.unsqueeze(0)?.broadcast_as((b, self.cfg.num_latents, 3))?.contiguous()?,
            ),
        };
        let mut g = self.embed.forward(points)?;
        let mut h = self.embed.forward(&pos_h)?;
        let mut f = self.embed.forward(&pos_f)?;
        for blk in &self.blocks {
            (g, h, f) = blk.forward(&g, &h, &f)?;
        }
        self.project.forward(&f, &g)
    }
}

/// Channel compression `F -> (mu, logvar)`.
#[derive(Clone, Debug)]
pub struct KlBlock {
    mean: Linear,
    logvar: Linear,
}

impl KlBlock {
    pub fn new(p: &Params, width: usize, latent_channels: usize) -> Result<Self> {
        Ok(KlBlock {
            mean: Linear::new(&p.pp("mean"), width, latent_channels)?,
            logvar: Linear::new(&p.pp("logvar"), width, latent_channels)?,
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.mean.forward(f)?, self.logvar.forward(f)?))
    }
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mu.dims() != logvar.dims() || mu.dims() != noise.dims() {
        return Err(invalid!(
            "reparameterize shape mismatch: {:?} {:?} {:?}",
            mu.dims(),
            logvar.dims(),
            noise.dims()
        ));
    }
    Ok((mu + (logvar * 0.5)?.exp()?.mul(noise)?)?)
}

/// Gaussian latent parameters and a draw from them.
#[derive(Clone, Debug)]
pub struct LatentSet {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

impl LatentSet {
    pub fn sample(mu: Tensor, logvar: Tensor, noise: &Tensor) -> Result<Self> {
        let z = reparameterize(&mu, &logvar, noise)?;
        Ok(LatentSet { mu, logvar, z })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ProceduralShape;
    use crate::nn::{scalar, ParamStore};
    use candle_core::{DType, Device};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_points: 64,
            num_patches: 16,
            num_latents: 4,
            width: 16,
            latent_channels: 4,
            num_blocks: 1,
            num_heads: 2,
            embed_frequencies: 4,
            ..Default::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        ProceduralShape::sphere(0.5).sample_surface(n, seed).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = tiny();
        c.num_latents = 32;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("num_latents") && e.contains("num_patches"), "{e}");
        let mut c = tiny();
        c.latent_channels = 16;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_rows() {
        let s = ParamStore::new(DType::F64, 1);
        let e = PositionalEmbedding::new(&s.root(), 8, 1.0, 16).unwrap();
        let empty = Tensor::zeros((1, 0, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(e.forward(&empty).unwrap().dims(), &[1, 0, 16]);
        let pts = crate::geometry::uniform_cube_points(100, 3);
        let mut with_dup = pts.clone();
        with_dup.push(pts[7]);
        let t = points_tensor(&with_dup, DType::F64, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let rows: Vec<Vec<f64>> = e.forward(&t).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[7], rows[100]);
        let mut min = f64::INFINITY;
        for i in 0..100 {
            for j in 0..i {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let s = ParamStore::new(DType::F32, 2);
        let enc = Encoder::new(&s.root(), &tiny()).unwrap();
        let clouds = vec![cloud(64, 1), cloud(64, 2)];
        let f1 = enc.encode(&clouds, 5).unwrap();
        let f2 = enc.encode(&clouds, 5).unwrap();
        assert_eq!(f1.dims(), &[2, 4, 16]);
        assert_eq!(max_diff(&f1, &f2), 0.0);
        let moved = vec![clouds[0].translated([0.1, 0.0, 0.0]), clouds[1].clone()];
        assert!(max_diff(&enc.encode(&moved, 5).unwrap(), &f1) > 1e-4);
        assert!(enc.encode(&[cloud(8, 1)], 5).is_err());
    }

    #[test]
    fn learnable_positions_mode() {
        let s = ParamStore::new(DType::F32, 2);
        let cfg = EncoderConfig { position_mode: PositionMode::Learnable, ..tiny() };
        let enc = Encoder::new(&s.root(), &cfg).unwrap();
        assert_eq!(enc.encode(&[cloud(64, 1)], 0).unwrap().dims(), &[1, 4, 16]);
        assert!(s.var("patch_positions").is_some());
    }

    #[test]
    fn set_invariance_with_fixed_anchors() {
        let s = ParamStore::new(DType::F64, 4);
        let enc = Encoder::new(&s.root(), &tiny()).unwrap();
        let c = cloud(64, 9);
        let anchors = enc.anchors(&c, 0).unwrap();
        let mut order: Vec<usize> = (0..64).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(1, &[]));
        let shuffled = c.permuted(&order);
        let a = enc.encode_with_anchors(&enc.clouds_tensor(&[c]).unwrap(), &[anchors.clone()]).unwrap();
        let b = enc
            .encode_with_anchors(&enc.clouds_tensor(&[shuffled]).unwrap(), &[anchors.remapped(&order)])
            .unwrap();
        assert!(max_diff(&a, &b) < 1e-4);
    }

    #[test]
    fn block_degenerate_sizes_and_width_check() {
        let s = ParamStore::new(DType::F32, 0);
        let blk = EncoderBlock::new(&s.root(), 8, 2, 4).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 1, 8), &Device::Cpu).unwrap();
        let (g, h, f) = blk.forward(&x, &x, &x).unwrap();
        for t in [g, h, f] {
            assert_eq!(t.dims(), &[1, 1, 8]);
            assert!(scalar(&t.abs().unwrap().max_all().unwrap()).unwrap().is_finite());
        }
        let bad = Tensor::zeros((1, 1, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(blk.forward(&x, &bad, &x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kl_block_and_reparameterize() {
        let s = ParamStore::new(DType::F64, 0);
        let kl = KlBlock::new(&s.root(), 8, 3).unwrap();
        s.insert("mean.weight", &Tensor::zeros((8, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
        s.insert("mean.bias", &Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap()).unwrap();
        let f = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let (mu, lv) = kl.forward(&f).unwrap();
        assert_eq!(lv.dims(), &[1, 5, 3]);
        for row in mu.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            assert_eq!(row, vec![1.0, 2.0, 3.0]);
        }
        let zero = mu.zeros_like().unwrap();
        assert_eq!(max_diff(&reparameterize(&mu, &lv, &zero).unwrap(), &mu), 0.0);
        let n = Tensor::randn(0f64, 1.0, (1, 5, 3), &Device::Cpu).unwrap();
        let z0 = reparameterize(&mu, &zero, &n).unwrap();
        assert!(max_diff(&z0, &(&mu + &n).unwrap()) < 1e-15);
        let z1 = (reparameterize(&mu, &lv, &n).unwrap() - &mu).unwrap();
        let z3 = (reparameterize(&mu, &lv, &(&n * 3.0).unwrap()).unwrap() - &mu).unwrap();
        assert!(max_diff(&(z1 * 3.0).unwrap(), &z3) < 1e-12);
        assert!(reparameterize(&mu, &lv, &n.narrow(1, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn reparameterize_sample_mean() {
        let n = 100_000;
        let mu = Tensor::full(0.3f64, n, &Device::Cpu).unwrap();
        let lv = Tensor::full(-0.5f64, n, &Device::Cpu).unwrap();
        let noise = Tensor::randn(0f64, 1.0, n, &Device::Cpu).unwrap();
        let z = reparameterize(&mu, &lv, &noise).unwrap();
        let mean = scalar(&z.mean_all().unwrap()).unwrap();
        assert!((mean - 0.3).abs() < 4.0 * (-0.25f64).exp() / (n as f64).sqrt());
    }
}
