//! Losses and the two-stage optimisation loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::fields::{query_occupancy, uncertainty_at_query};
use crate::geometry::{sample_queries, Point, PointCloud, ProceduralShape, QueryBatch, DEFAULT_NEAR_SIGMA};
use crate::model::{ShapeVae, Stage};
use crate::nn::{normalize_last, scalar, ParamStore, LAYER_NORM_EPS};
use crate::optim::{AdamW, LrSchedule};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_unc: f64,
    pub lambda_kl: f64,
    pub near_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_unc: 0.01, lambda_kl: 0.001, near_weight: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Shapes per step. Full-scale runs use effective batches of 256 to 1024;
    /// desk runs use a handful.
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    /// Largest global gradient norm before rescaling; 0 disables clipping.
    pub grad_clip: f64,
    pub n_vol: usize,
    pub n_near: usize,
    pub near_sigma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub log_every: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: LrSchedule::default(),
            weight_decay: 0.01,
            grad_clip: 1.0,
            n_vol: 4096,
            n_near: 4096,
            near_sigma: DEFAULT_NEAR_SIGMA,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if w.lambda_unc < 0.0 || w.lambda_kl < 0.0 || w.near_weight < 0.0 {
            return Err(Error::Config("training.weights entries must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if self.n_vol + self.n_near == 0 {
            return Err(Error::Config("training.n_vol and training.n_near cannot both be zero".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("training.grad_clip ({}) must be non-negative", self.grad_clip)));
        }
        if self.near_sigma <= 0.0 {
            return Err(Error::Config(format!("training.near_sigma ({}) must be positive", self.near_sigma)));
        }
        Ok(())
    }
}

/// Elementwise binary cross-entropy on logits, stable for large `|x|`.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((relu - logits.mul(labels)?)? + softplus)?)
}

/// Mean BCE over volume queries plus `near_weight` times the mean over
/// near-surface queries. `near` flags the near-surface entries.
pub fn recon_loss(logits: &Tensor, labels: &Tensor, near: &[bool], near_weight: f64) -> Result<Tensor> {
    let n_near = near.iter().filter(|&&b| b).count();
    let n_vol = near.len() - n_near;
    if logits.elem_count() != near.len() {
        return Err(invalid!("{} logits but {} partition flags", logits.elem_count(), near.len()));
    }
    let w: Vec<f64> = near
        .iter()
        .map(|&b| if b { near_weight / n_near as f64 } else { 1.0 / n_vol as f64 })
        .collect();
    let w = Tensor::from_vec(w, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
    Ok(bce_with_logits(logits, labels)?.mul(&w)?.sum_all()?)
}

/// Per-query BCE clipped to [0, 1]; the uncertainty regression targets.
pub fn per_query_bce(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(bce_with_logits(logits, labels)?.clamp(0.0, 1.0)?)
}

/// Mean squared error against targets that never carry gradient.
pub fn uncertainty_loss(u: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok((u - targets.detach())?.sqr()?.mean_all()?)
}

/// Mean over entries of `0.5 (mu² + exp(logvar) - logvar - 1)`.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let t = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    Ok(((t - 1.0)? * 0.5)?.mean_all()?)
}

/// MSE between per-vector normalised features (no learned scale or shift).
pub fn feature_matching_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    let a = normalize_last(predicted, LAYER_NORM_EPS)?;
    let b = normalize_last(target, LAYER_NORM_EPS)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// One training batch, fully determined by `(seed, step)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub step: u64,
    pub shape_ids: Vec<usize>,
    pub clouds: Vec<PointCloud>,
    pub queries: Vec<QueryBatch>,
    pub anchor_seed: u64,
}

impl Batch {
    pub fn new(shapes: &[ProceduralShape], cfg: &TrainConfig, num_points: usize, step: u64) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let n = shapes.len();
        let shape_ids: Vec<usize> = (0..cfg.batch_size as u64)
            .map(|b| {
                let slot = step * cfg.batch_size as u64 + b;
                let epoch = slot / n as u64;
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng::stream(cfg.seed, &[rng::name_tag("epoch"), epoch]));
                order[(slot % n as u64) as usize]
            })
            .collect();
        let mut clouds = Vec::with_capacity(shape_ids.len());
        let mut queries = Vec::with_capacity(shape_ids.len());
        for (b, &id) in shape_ids.iter().enumerate() {
            let s = rng::derive_seed(cfg.seed, &[step, b as u64]);
            clouds.push(shapes[id].sample_surface(num_points, rng::derive_seed(s, &[1]))?);
            queries.push(sample_queries(&shapes[id], cfg.n_vol, cfg.n_near, cfg.near_sigma, rng::derive_seed(s, &[2]))?);
        }
        Ok(Batch { step, shape_ids, clouds, queries, anchor_seed: rng::derive_seed(cfg.seed, &[rng::name_tag("anchors"), step]) })
    }

    fn points(&self) -> Vec<Vec<Point>> {
        self.queries.iter().map(|q| q.points.clone()).collect()
    }

    fn labels(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let b = self.queries.len();
        let q = self.queries[0].len();
        let v: Vec<f64> = self
            .queries
            .iter()
            .flat_map(|qb| qb.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(v, (b, q), device)?.to_dtype(dtype)?)
    }

    fn near_flags(&self) -> Vec<bool> {
        self.queries.iter().flat_map(|q| q.near.iter().copied()).collect()
    }
}

/// Loss terms of one step; `total` is what was minimised.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub step: u64,
    pub total: f64,
    pub recon_final: f64,
    pub recon_base: f64,
    pub uncertainty: f64,
    pub feature_matching: Option<f64>,
    pub kl: Option<f64>,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl LossTerms {
    fn is_finite(&self) -> bool {
        [self.total, self.recon_final, self.recon_base, self.uncertainty]
            .into_iter()
            .chain(self.feature_matching)
            .chain(self.kl)
            .all(f64::is_finite)
    }
}

/// Reconstruction part shared by both stages:
/// `recon(final) + recon(base) + lambda_unc * L_unc`.
fn autoencoder_loss(model: &ShapeVae, f_prime: &Tensor, batch: &Batch, w: &LossWeights) -> Result<(Tensor, LossTerms)> {
    let dec = model.decoder();
    let out = dec.forward(f_prime)?;
    let pts = batch.points();
    let labels = batch.labels(f_prime.dtype(), f_prime.device())?;
    let near = batch.near_flags();
    let final_logits = query_occupancy(model.field_mlp(), &out.triplane, &pts)?;
    let base_logits = query_occupancy(model.field_mlp(), &out.base, &pts)?;
    let recon_final = recon_loss(&final_logits, &labels, &near, w.near_weight)?;
    let recon_base = recon_loss(&base_logits, &labels, &near, w.near_weight)?;
    let targets = per_query_bce(&base_logits.detach(), &labels)?;
    // The head sees detached tokens here so this term only trains the head.
    let unc_logits = dec.predict_uncertainty(&out.initial_tokens.detach())?;
    let grid = dec.config().grid();
    let b = unc_logits.dims()[0];
    let u = uncertainty_at_query(&unc_logits.reshape((b, 3, grid, grid))?, &pts)?;
    let unc = uncertainty_loss(&u, &targets)?;
    let total = ((&recon_final + &recon_base)? + (&unc * w.lambda_unc)?)?;
    let terms = LossTerms {
        step: batch.step,
        total: scalar(&total)?,
        recon_final: scalar(&recon_final)?,
        recon_base: scalar(&recon_base)?,
        uncertainty: scalar(&unc)?,
        ..Default::default()
    };
    Ok((total, terms))
}

/// `L_ae` for a batch: the encoder output goes straight to the decoder.
pub fn stage1_loss(model: &ShapeVae, batch: &Batch, w: &LossWeights) -> Result<(Tensor, LossTerms)> {
    let f = model.encode(&batch.clouds, batch.anchor_seed)?;
    autoencoder_loss(model, &f, batch, w)
}

/// `L_vae = MSE(n(F̂'), n(F)) + L_ae(F̂') + lambda_kl * KL` with sampling noise
/// drawn from `(seed, step)`.
pub fn stage2_loss(model: &ShapeVae, batch: &Batch, w: &LossWeights, noise_seed: u64) -> Result<(Tensor, LossTerms)> {
    let f = model.encode(&batch.clouds, batch.anchor_seed)?.detach();
    let (mu, logvar) = model.kl().forward(&f)?;
    let mut r = rng::stream(noise_seed, &[batch.step]);
    let noise: Vec<f64> = (0..mu.elem_count()).map(|_| StandardNormal.sample(&mut r)).collect();
    let noise = Tensor::from_vec(noise, mu.shape(), mu.device())?.to_dtype(mu.dtype())?;
    let z = crate::encoder::reparameterize(&mu, &logvar, &noise)?;
    let f_hat = model.latent_decoder().forward(&z)?;
    let fm = feature_matching_loss(&f_hat, &f)?;
    let kl = kl_loss(&mu, &logvar)?;
    let (ae, mut terms) = autoencoder_loss(model, &f_hat, batch, w)?;
    let total = ((&fm + ae)? + (&kl * w.lambda_kl)?)?;
    terms.total = scalar(&total)?;
    terms.feature_matching = Some(scalar(&fm)?);
    terms.kl = Some(scalar(&kl)?);
    Ok((total, terms))
}

/// Optimiser state plus the step counter for one stage.
pub struct Trainer {
    cfg: TrainConfig,
    stage: Stage,
    optim: AdamW,
    step: u64,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, stage: Stage) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg: cfg.clone(), stage, optim: AdamW::new(cfg.weight_decay), step: 0, dump_dir: None })
    }

    /// Directory receiving a JSON dump when a loss turns non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn loss(&self, model: &ShapeVae, batch: &Batch) -> Result<(Tensor, LossTerms)> {
        match self.stage {
            Stage::Ae => stage1_loss(model, batch, &self.cfg.weights),
            Stage::Vae => stage2_loss(model, batch, &self.cfg.weights, rng::derive_seed(self.cfg.seed, &[rng::name_tag("noise")])),
        }
    }

    /// One optimisation step on the batch for the current step index.
    pub fn train_step(&mut self, model: &ShapeVae, store: &ParamStore, shapes: &[ProceduralShape]) -> Result<LossTerms> {
        let batch = Batch::new(shapes, &self.cfg, model.config().encoder.num_points, self.step)?;
        let (loss, mut terms) = self.loss(model, &batch)?;
        let lr = self.cfg.lr.at(self.step);
        terms.lr = lr;
        if !terms.is_finite() {
            return Err(self.numeric_failure(&batch, shapes, &terms));
        }
        let grads = loss.backward()?;
        for (name, var) in store.frozen_vars() {
            if grads.get(var.as_tensor()).is_some() {
                return Err(Error::Internal(format!("frozen parameter {name} received a gradient")));
            }
        }
        let clip = (self.cfg.grad_clip > 0.0).then_some(self.cfg.grad_clip);
        terms.grad_norm = self.optim.step_clipped(store, &grads, lr, clip)?;
        self.step += 1;
        Ok(terms)
    }

    fn numeric_failure(&self, batch: &Batch, shapes: &[ProceduralShape], terms: &LossTerms) -> Error {
        let dump = serde_json::json!({
            "stage": self.stage.as_str(),
            "step": self.step,
            "seed": self.cfg.seed,
            "shape_ids": batch.shape_ids,
            "shapes": batch.shape_ids.iter().map(|&i| &shapes[i]).collect::<Vec<_>>(),
            "anchor_seed": batch.anchor_seed,
            "losses": terms,
        });
        let mut msg = format!("non-finite loss at step {}: {}", self.step, dump["losses"]);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nan_step_{}.json", self.step));
            let written = std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()));
            match written {
                Ok(()) => msg.push_str(&format!("; batch dumped to {}", path.display())),
                Err(e) => msg.push_str(&format!("; dump to {} failed: {e}", path.display())),
            }
        }
        Error::Numeric(msg)
    }

    /// Checkpoint of parameters, optimiser moments and the step counter.
    pub fn checkpoint(&self, store: &ParamStore, config: serde_json::Value) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.stage.as_str(), self.step, self.cfg.seed, config);
        c.add_params(store)?;
        let (optim_steps, moments) = self.optim.state();
        c.add_tensors("optim", &moments)?;
        c.meta.insert("optim_steps".into(), serde_json::json!(optim_steps));
        Ok(c)
    }

    /// Restores parameters and, when the stage matches, optimiser state and
    /// step. A checkpoint of the previous stage only seeds the parameters.
    pub fn restore(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_params(store)?;
        if ckpt.stage == self.stage.as_str() {
            let optim_steps = ckpt.meta.get("optim_steps").and_then(|v| v.as_u64()).unwrap_or(0);
            self.optim.load_state(optim_steps, ckpt.tensors("optim", store.device())?);
            self.step = ckpt.step;
        }
        Ok(())
    }
}

/// Append-only JSON-lines metric log.
pub struct MetricLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(MetricLog { file, path })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs the trainer up to `cfg.steps`, logging every `log_every` steps and
/// handing checkpoints to `save` on the configured cadence and at the end.
pub fn train(
    trainer: &mut Trainer,
    model: &ShapeVae,
    store: &ParamStore,
    shapes: &[ProceduralShape],
    config: &serde_json::Value,
    mut log: Option<&mut MetricLog>,
    mut save: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Vec<LossTerms>> {
    let mut history = Vec::new();
    while trainer.step() < trainer.config().steps {
        let terms = trainer.train_step(model, store, shapes)?;
        let every = trainer.config().log_every.max(1);
        if terms.step % every == 0 || trainer.step() == trainer.config().steps {
            if let Some(l) = log.as_deref_mut() {
                l.write(&terms)?;
            }
            log::info!("{} step {} loss {:.5}", trainer.stage().as_str(), terms.step, terms.total);
        }
        history.push(terms);
        let ce = trainer.config().checkpoint_every;
        if ce > 0 && trainer.step() % ce == 0 && trainer.step() < trainer.config().steps {
            save(&trainer.checkpoint(store, config.clone())?)?;
        }
    }
    save(&trainer.checkpoint(store, config.clone())?)?;
    Ok(history)
}
