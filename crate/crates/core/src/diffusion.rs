//! EDM latent diffusion over `(M, D)` latent sets.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::geometry::Mesh;
use crate::model::{ExtractConfig, ShapeVae};
use crate::nn::{gelu, scalar, Init, LayerNorm, Linear, ParamStore, Params, SelfAttentionBlock};
use crate::optim::{AdamW, LrSchedule};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Latent vectors per sample (M) and channels per vector (D).
    pub num_latents: usize,
    pub latent_channels: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            num_layers: 8,
            width: 256,
            num_heads: 8,
            mlp_ratio: 4,
            num_latents: 32,
            latent_channels: 32,
            num_classes: 0,
            sigma_data: 1.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return fail(format!(
                "diffusion.denoiser.sigma_min ({}) must be positive and below diffusion.denoiser.sigma_max ({})",
                self.sigma_min, self.sigma_max
            ));
        }
        if self.rho <= 0.0 || self.sigma_data <= 0.0 || self.p_std <= 0.0 {
            return fail("diffusion.denoiser.rho, sigma_data and p_std must be positive".into());
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return fail(format!(
                "diffusion.denoiser.width ({}) must be divisible by diffusion.denoiser.num_heads ({})",
                self.width, self.num_heads
            ));
        }
        if self.num_latents == 0 || self.latent_channels == 0 {
            return fail("diffusion.denoiser.num_latents and latent_channels must be positive".into());
        }
        Ok(())
    }
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioning {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn preconditioning(sigma: f64, sigma_data: f64) -> Preconditioning {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Preconditioning {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

/// Loss weight `(σ² + σ_d²) / (σ σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Noise levels `σ_0 > … > σ_{N-1}` on the ρ-spaced ladder from `sigma_max`
/// to `sigma_min`, followed by a terminal 0.
pub fn sigma_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid!("sampling needs at least one step"));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let mut s: Vec<f64> = (0..steps)
        .map(|i| {
            let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            (a + t * (b - a)).powf(rho)
        })
        .collect();
    s.push(0.0);
    Ok(s)
}

/// A denoiser `D(x; σ, class)` over `(batch, M, D)` latents.
pub trait Denoise {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], class: Option<usize>) -> Result<Tensor>;
}

/// Transformer over the M latent slots with learned per-slot embeddings and
/// a noise/class embedding added to every token.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    cfg: DenoiserConfig,
    in_proj: Linear,
    positions: Tensor,
    noise_hidden: Linear,
    noise_out: Linear,
    classes: Option<Tensor>,
    blocks: Vec<SelfAttentionBlock>,
    norm: LayerNorm,
    out: Linear,
}

/// Sinusoidal features of the scalar noise conditioning.
const NOISE_FEATURES: usize = 32;

impl DenoiserNet {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        Ok(DenoiserNet {
            cfg: cfg.clone(),
            in_proj: Linear::new(&p.pp("in_proj"), cfg.latent_channels, w)?,
            positions: p.get("positions", &[1, cfg.num_latents, w], Init::Normal(0.02))?,
            noise_hidden: Linear::new(&p.pp("noise.hidden"), NOISE_FEATURES, w)?,
            noise_out: Linear::new(&p.pp("noise.out"), w, w)?,
            classes: if cfg.num_classes > 0 {
                Some(p.get("classes", &[cfg.num_classes, w], Init::Zeros)?)
            } else {
                None
            },
            blocks: (0..cfg.num_layers)
                .map(|i| SelfAttentionBlock::new(&p.pp(&format!("blocks.{i}")), w, cfg.num_heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&p.pp("norm"), w)?,
            out: Linear::new(&p.pp("out"), w, cfg.latent_channels)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn noise_embedding(&self, c_noise: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        let half = NOISE_FEATURES / 2;
        let mut v = Vec::with_capacity(c_noise.len() * NOISE_FEATURES);
        for &c in c_noise {
            for k in 0..half {
                let freq = (-(k as f64) / half as f64 * (1000f64).ln()).exp();
                v.push((c * freq * 100.0).cos());
            }
            for k in 0..half {
                let freq = (-(k as f64) / half as f64 * (1000f64).ln()).exp();
                v.push((c * freq * 100.0).sin());
            }
        }
        let f = Tensor::from_vec(v, (c_noise.len(), NOISE_FEATURES), device)?.to_dtype(dtype)?;
        self.noise_out.forward(&gelu(&self.noise_hidden.forward(&f)?)?)
    }

    /// Raw network `F(c_in x, c_noise, class)`.
    pub fn forward(&self, x: &Tensor, c_noise: &[f64], class: Option<usize>) -> Result<Tensor> {
        let (b, m, d) = x.dims3()?;
        if m != self.cfg.num_latents || d != self.cfg.latent_channels {
            return Err(Error::Config(format!(
                "latent shape ({m}, {d}) does not match the denoiser's ({}, {})",
                self.cfg.num_latents, self.cfg.latent_channels
            )));
        }
        if c_noise.len() != b {
            return Err(invalid!("{} noise levels for a batch of {b}", c_noise.len()));
        }
        let mut cond = self.noise_embedding(c_noise, x.dtype(), x.device())?;
        match (class, &self.classes) {
            (None, _) => {}
            (Some(c), Some(table)) if c < self.cfg.num_classes => {
                cond = cond.broadcast_add(&table.narrow(0, c, 1)?)?;
            }
            (Some(c), _) => {
                return Err(invalid!("class id {c} outside the {} configured classes", self.cfg.num_classes));
            }
        }
        let mut h = self
            .in_proj
            .forward(x)?
            .broadcast_add(&self.positions)?
            .broadcast_add(&cond.unsqueeze(1)?)?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        self.out.forward(&self.norm.forward(&h)?)
    }
}

/// Preconditioned denoiser `c_skip x + c_out F(c_in x, c_noise)`.
#[derive(Clone, Debug)]
pub struct EdmDenoiser {
    pub net: DenoiserNet,
}

impl EdmDenoiser {
    pub fn new(p: &Params, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(EdmDenoiser { net: DenoiserNet::new(p, cfg)? })
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.net.config()
    }
}

fn per_sample(values: &[f64], x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1), x.device())?.to_dtype(x.dtype())?)
}

impl Denoise for EdmDenoiser {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], class: Option<usize>) -> Result<Tensor> {
        if sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid!("denoising needs positive noise levels"));
        }
        let sd = self.config().sigma_data;
        let pre: Vec<Preconditioning> = sigmas.iter().map(|&s| preconditioning(s, sd)).collect();
        let c = |f: fn(&Preconditioning) -> f64| per_sample(&pre.iter().map(f).collect::<Vec<_>>(), x);
        let inner = x.broadcast_mul(&c(|p| p.c_in)?)?;
        let c_noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let f = self.net.forward(&inner, &c_noise, class)?;
        Ok((x.broadcast_mul(&c(|p| p.c_skip)?)? + f.broadcast_mul(&c(|p| p.c_out)?)?)?)
    }
}

/// `mean_b λ(σ_b) · mean((D(z0 + σ_b n) - z0)²)`.
pub fn diffusion_loss(
    denoiser: &dyn Denoise,
    z0: &Tensor,
    noise: &Tensor,
    sigmas: &[f64],
    sigma_data: f64,
    class: Option<usize>,
) -> Result<Tensor> {
    let (b, _, _) = z0.dims3()?;
    if noise.dims() != z0.dims() || sigmas.len() != b {
        return Err(invalid!("diffusion_loss inputs disagree in shape"));
    }
    let noisy = (z0 + noise.broadcast_mul(&per_sample(sigmas, z0)?)?)?;
    let d = denoiser.denoise(&noisy, sigmas, class)?;
    let err = (d - z0)?.sqr()?.mean_keepdim(2)?.mean_keepdim(1)?;
    let w: Vec<f64> = sigmas.iter().map(|&s| loss_weight(s, sigma_data)).collect();
    Ok(err.mul(&per_sample(&w, z0)?)?.mean_all()?)
}

/// Log-normal noise levels `exp(P_mean + P_std · n)`.
pub fn sample_sigmas(n: usize, p_mean: f64, p_std: f64, seed: u64) -> Result<Vec<f64>> {
    let d = Normal::new(p_mean, p_std).map_err(|e| Error::Internal(e.to_string()))?;
    let mut r = rng::stream(seed, &[rng::name_tag("sigma")]);
    Ok((0..n).map(|_| d.sample(&mut r).exp()).collect())
}

/// Standard normal tensor drawn from `(seed, tag)`.
pub fn gaussian(shape: &[usize], seed: u64, tag: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut r = rng::stream(seed, &[tag]);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
}

/// Deterministic probability-flow ODE sampler. Returns the samples and the
/// number of denoiser evaluations.
pub fn sample_latents(
    denoiser: &dyn Denoise,
    shape: (usize, usize, usize),
    schedule: &[f64],
    solver: Solver,
    class: Option<usize>,
    seed: u64,
    dtype: DType,
) -> Result<(Tensor, usize)> {
    if schedule.len() < 2 {
        return Err(invalid!("schedule needs at least one step"));
    }
    let (b, m, d) = shape;
    let mut x = (gaussian(&[b, m, d], seed, rng::name_tag("init"), dtype, &Device::Cpu)? * schedule[0])?;
    let mut evals = 0;
    for w in schedule.windows(2) {
        let (s, s_next) = (w[0], w[1]);
        let d1 = ((&x - denoiser.denoise(&x, &vec![s; b], class)?)? / s)?;
        evals += 1;
        let euler = (&x + (&d1 * (s_next - s))?)?;
        x = if solver == Solver::Heun && s_next > 0.0 {
            let d2 = ((&euler - denoiser.denoise(&euler, &vec![s_next; b], class)?)? / s_next)?;
            evals += 1;
            (&x + ((d1 + d2)? * (0.5 * (s_next - s)))?)?
        } else {
            euler
        };
    }
    Ok((x, evals))
}

/// Per-channel standardisation of latent sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standard deviation of the standardised latents; the EDM `sigma_data`.
    pub sigma_data: f64,
}

impl LatentStats {
    /// Statistics over `(count, M, D)` latents, per channel D.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let (n, m, d) = latents.dims3()?;
        let flat: Vec<Vec<f64>> = latents.to_dtype(DType::F64)?.reshape((n * m, d))?.to_vec2()?;
        let rows = flat.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &flat {
            for (a, v) in mean.iter_mut().zip(r) {
                *a += v / rows;
            }
        }
        let mut std = vec![0.0; d];
        for r in &flat {
            for k in 0..d {
                std[k] += (r[k] - mean[k]).powi(2) / rows;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        let mut total = 0.0;
        for r in &flat {
            for k in 0..d {
                total += ((r[k] - mean[k]) / std[k]).powi(2);
            }
        }
        Ok(LatentStats { mean, std, sigma_data: (total / (rows * d as f64)).sqrt() })
    }

    fn tensors(&self, like: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.mean.len();
        let m = Tensor::from_vec(self.mean.clone(), (1, 1, d), like.device())?.to_dtype(like.dtype())?;
        let s = Tensor::from_vec(self.std.clone(), (1, 1, d), like.device())?.to_dtype(like.dtype())?;
        Ok((m, s))
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors(z)?;
        Ok(z.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: LrSchedule { base: 1e-4, ..Default::default() },
            weight_decay: 0.0,
            seed: 0,
            log_every: 10,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("diffusion.train.batch_size must be positive".into()));
        }
        if !(self.lr.base > 0.0) {
            return Err(Error::Config("diffusion.train.lr.base must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionLoss {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Optimiser state for the denoiser over a fixed set of standardised latents.
pub struct DiffusionTrainer {
    cfg: DiffusionTrainConfig,
    optim: AdamW,
    step: u64,
}

impl DiffusionTrainer {
    pub fn new(cfg: &DiffusionTrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DiffusionTrainer { cfg: cfg.clone(), optim: AdamW::new(cfg.weight_decay), step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &DiffusionTrainConfig {
        &self.cfg
    }

    /// Row indices of the latents used at `step`: consecutive slices of a
    /// per-epoch permutation.
    pub fn batch_indices(&self, count: usize, step: u64) -> Vec<usize> {
        let b = self.cfg.batch_size;
        (0..b as u64)
            .map(|k| {
                let slot = step * b as u64 + k;
                let epoch = slot / count as u64;
                let mut order: Vec<usize> = (0..count).collect();
                order.shuffle(&mut rng::stream(self.cfg.seed, &[rng::name_tag("epoch"), epoch]));
                order[(slot % count as u64) as usize]
            })
            .collect()
    }

    /// Loss on the batch for the current step, from `(count, M, D)` standardised latents.
    pub fn loss(&self, denoiser: &EdmDenoiser, latents: &Tensor, classes: Option<&[usize]>) -> Result<Tensor> {
        let (count, m, d) = latents.dims3()?;
        if count == 0 {
            return Err(invalid!("no latents to train on"));
        }
        let idx = self.batch_indices(count, self.step);
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), latents.device())?;
        let z0 = latents.index_select(&ids, 0)?;
        let step_seed = rng::derive_seed(self.cfg.seed, &[rng::name_tag("step"), self.step]);
        let noise = gaussian(&[idx.len(), m, d], step_seed, rng::name_tag("noise"), latents.dtype(), latents.device())?;
        let c = denoiser.config();
        let sigmas = sample_sigmas(idx.len(), c.p_mean, c.p_std, step_seed)?;
        match classes {
            None => diffusion_loss(denoiser, &z0, &noise, &sigmas, c.sigma_data, None),
            Some(labels) => {
                // Class embeddings are per call, so the batch is split by row.
                let mut total: Option<Tensor> = None;
                for (row, &i) in idx.iter().enumerate() {
                    let l = diffusion_loss(
                        denoiser,
                        &z0.narrow(0, row, 1)?,
                        &noise.narrow(0, row, 1)?,
                        &sigmas[row..row + 1],
                        c.sigma_data,
                        Some(labels[i]),
                    )?;
                    total = Some(match total {
                        None => l,
                        Some(t) => (t + l)?,
                    });
                }
                Ok((total.expect("non-empty batch") / idx.len() as f64)?)
            }
        }
    }

    pub fn train_step(
        &mut self,
        denoiser: &EdmDenoiser,
        store: &ParamStore,
        latents: &Tensor,
        classes: Option<&[usize]>,
    ) -> Result<DiffusionLoss> {
        let loss = self.loss(denoiser, latents, classes)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite diffusion loss at step {}", self.step)));
        }
        let lr = self.cfg.lr.at(self.step);
        self.optim.step(store, &loss.backward()?, lr)?;
        let out = DiffusionLoss { step: self.step, loss: value, lr };
        self.step += 1;
        Ok(out)
    }

    /// Checkpoint of the denoiser, its optimiser state, the latent statistics
    /// and the hash of the VAE checkpoint the latents came from.
    pub fn checkpoint(&self, store: &ParamStore, cfg: &DenoiserConfig, stats: &LatentStats, vae_hash: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(DIFFUSION_STAGE, self.step, self.cfg.seed, serde_json::to_value(cfg)?);
        c.add_params(store)?;
        let (optim_steps, moments) = self.optim.state();
        c.add_tensors("optim", &moments)?;
        c.meta.insert("optim_steps".into(), serde_json::json!(optim_steps));
        c.meta.insert("vae_hash".into(), serde_json::json!(vae_hash));
        c.meta.insert("latent_stats".into(), serde_json::to_value(stats)?);
        c.meta.insert("latents_standardized".into(), serde_json::json!(true));
        c.meta.insert("train".into(), serde_json::to_value(&self.cfg)?);
        Ok(c)
    }

    pub fn restore(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        ckpt.expect_stage(DIFFUSION_STAGE)?;
        ckpt.load_params(store)?;
        let optim_steps = ckpt.meta.get("optim_steps").and_then(|v| v.as_u64()).unwrap_or(0);
        self.optim.load_state(optim_steps, ckpt.tensors("optim", store.device())?);
        self.step = ckpt.step;
        Ok(())
    }
}

pub const DIFFUSION_STAGE: &str = "diffusion";

/// A denoiser restored from a diffusion checkpoint.
pub struct LoadedDiffusion {
    pub store: ParamStore,
    pub denoiser: EdmDenoiser,
    pub stats: LatentStats,
    pub vae_hash: String,
}

impl LoadedDiffusion {
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_stage(DIFFUSION_STAGE)?;
        let cfg: DenoiserConfig = serde_json::from_value(ckpt.config.clone())?;
        let store = ParamStore::new(dtype, ckpt.seed);
        let denoiser = EdmDenoiser::new(&store.root(), &cfg)?;
        ckpt.load_params(&store)?;
        let stats: LatentStats = serde_json::from_value(
            ckpt.meta.get("latent_stats").cloned().ok_or_else(|| Error::Data("diffusion checkpoint lacks latent_stats".into()))?,
        )?;
        let vae_hash = ckpt.meta.get("vae_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        Ok(LoadedDiffusion { store, denoiser, stats, vae_hash })
    }

    /// Fails unless the checkpoint was trained against `vae_hash`.
    pub fn check_vae(&self, vae_hash: &str, force: bool) -> Result<()> {
        if self.vae_hash != vae_hash && !force {
            return Err(Error::Config(format!(
                "diffusion checkpoint was trained against VAE {} but VAE {} was given; pass --force to override",
                self.vae_hash, vae_hash
            )));
        }
        Ok(())
    }
}

/// Wall-clock seconds per generation stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub sampling: f64,
    pub decoding: f64,
    pub full: f64,
    pub denoiser_evaluations: usize,
}

pub struct Generated {
    /// Samples in VAE latent units, `(n, M, D)`.
    pub latents: Tensor,
    pub meshes: Vec<Mesh>,
    pub timing: TimingReport,
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub count: usize,
    pub steps: usize,
    pub solver: Solver,
    pub class: Option<usize>,
    pub seed: u64,
    pub extract: ExtractConfig,
}

/// Samples latents, decodes them through the VAE and extracts one mesh each.
pub fn generate(vae: &ShapeVae, denoiser: &EdmDenoiser, stats: &LatentStats, opts: &GenerateOptions) -> Result<Generated> {
    let dc = denoiser.config();
    let ec = &vae.config().encoder;
    if (dc.num_latents, dc.latent_channels) != (ec.num_latents, ec.latent_channels) || stats.mean.len() != dc.latent_channels {
        return Err(Error::Config(format!(
            "denoiser latents ({}, {}) do not match the VAE's ({}, {})",
            dc.num_latents, dc.latent_channels, ec.num_latents, ec.latent_channels
        )));
    }
    let start = Instant::now();
    let schedule = sigma_schedule(opts.steps, dc.sigma_min, dc.sigma_max, dc.rho)?;
    let dtype = vae.dtype();
    let (z, evals) = sample_latents(
        denoiser,
        (opts.count, dc.num_latents, dc.latent_channels),
        &schedule,
        opts.solver,
        opts.class,
        opts.seed,
        dtype,
    )?;
    let latents = stats.denormalize(&z)?;
    let sampling = start.elapsed().as_secs_f64();
    let decode_start = Instant::now();
    let out = vae.decode_latents(&latents)?;
    let meshes = (0..opts.count)
        .map(|i| opts.extract.mesh(&vae.occupancy_field(&out.triplane, i)?))
        .collect::<Result<Vec<_>>>()?;
    let decoding = decode_start.elapsed().as_secs_f64();
    Ok(Generated {
        latents,
        meshes,
        timing: TimingReport { sampling, decoding, full: start.elapsed().as_secs_f64(), denoiser_evaluations: evals },
    })
}

/// Median samples per second of one denoiser evaluation over `runs` timings.
pub fn denoiser_throughput(denoiser: &EdmDenoiser, batch: usize, runs: usize) -> Result<f64> {
    let c = denoiser.config();
    let x = gaussian(&[batch, c.num_latents, c.latent_channels], 0, 0, DType::F32, &Device::Cpu)?;
    let sigmas = vec![1.0; batch];
    denoiser.denoise(&x, &sigmas, None)?;
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        denoiser.denoise(&x, &sigmas, None)?;
        rates.push(batch as f64 / t.elapsed().as_secs_f64());
    }
    rates.sort_by(|a, b| a.total_cmp(b));
    Ok(rates[rates.len() / 2])
}
