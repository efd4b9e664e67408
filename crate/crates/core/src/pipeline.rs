//! End-to-end stage drivers shared by the command line and the tests:
//! autoencoder and VAE training, latent extraction, diffusion training and
//! reconstruction with metrics.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::diffusion::{DiffusionLoss, DiffusionTrainer, EdmDenoiser, LatentStats, DIFFUSION_STAGE};
use crate::error::{Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{Mesh, PointCloud, ProceduralShape};
use crate::metrics::{self, MetricReport};
use crate::model::{ShapeVae, Stage};
use crate::nn::ParamStore;
use crate::rng;
use crate::training::{self, LossTerms, MetricLog, TrainConfig, Trainer};

/// Anchor seed used for every evaluation-time encoding.
pub const EVAL_SEED: u64 = 0;
/// Shapes encoded per forward pass when extracting latents.
const ENCODE_CHUNK: usize = 8;

/// A VAE checkpoint restored into a live model.
pub struct LoadedVae {
    pub config: Config,
    pub stage: Stage,
    pub store: ParamStore,
    pub model: ShapeVae,
    pub hash: String,
}

impl LoadedVae {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let stage: Stage = ckpt.stage.parse().map_err(|_| {
            Error::Config(format!("checkpoint stage `{}` is not an autoencoder stage (ae or vae)", ckpt.stage))
        })?;
        let config = config_from_checkpoint(ckpt)?;
        let store = ParamStore::new(DType::F32, ckpt.seed);
        ckpt.load_params(&store)?;
        let model = ShapeVae::for_stage(&store, &config.model(), stage)?;
        Ok(LoadedVae { config, stage, store, model, hash: ckpt.hash() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Triplanes for a batch of clouds; the VAE path uses the latent mean.
    pub fn fields(&self, clouds: &[PointCloud]) -> Result<Vec<OccupancyField>> {
        let out = self.model.reconstruct(clouds, self.stage, EVAL_SEED)?;
        (0..clouds.len()).map(|i| self.model.occupancy_field(&out.triplane, i)).collect()
    }
}

pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<Config> {
    let cfg: Config = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Data(format!("checkpoint config does not parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(cfg: &Config, stage: Stage) -> &TrainConfig {
    match stage {
        Stage::Ae => &cfg.training.ae,
        Stage::Vae => &cfg.training.vae,
    }
}

/// Inputs for one autoencoder training run.
pub struct StageRun<'a> {
    pub config: &'a Config,
    pub stage: Stage,
    pub shapes: &'a [ProceduralShape],
    /// The stage-1 checkpoint the VAE stage starts from.
    pub previous: Option<&'a Checkpoint>,
    /// A checkpoint of this same stage to continue from.
    pub resume: Option<&'a Checkpoint>,
    pub dump_dir: Option<&'a Path>,
}

pub struct StageResult {
    pub store: ParamStore,
    pub model: ShapeVae,
    pub checkpoint: Checkpoint,
    pub history: Vec<LossTerms>,
}

/// Trains stage 1 or stage 2 to `steps`, calling `save` for intermediate and
/// final checkpoints.
pub fn train_stage(
    run: &StageRun,
    log: Option<&mut MetricLog>,
    save: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<StageResult> {
    let tc = train_config(run.config, run.stage);
    let store = ParamStore::new(DType::F32, tc.seed);
    match (run.stage, run.previous) {
        (Stage::Vae, None) if run.resume.is_none() => {
            return Err(Error::Config(
                "the vae stage needs a trained autoencoder; run `train ae` first and pass its checkpoint".into(),
            ));
        }
        (Stage::Vae, Some(prev)) => {
            prev.expect_stage(Stage::Ae.as_str())?;
            prev.load_params(&store)?;
        }
        _ => {}
    }
    if let Some(r) = run.resume {
        r.expect_stage(run.stage.as_str())?;
        r.load_params(&store)?;
    }
    let model = ShapeVae::for_stage(&store, &run.config.model(), run.stage)?;
    let mut trainer = Trainer::new(tc, run.stage)?;
    if let Some(d) = run.dump_dir {
        trainer = trainer.with_dump_dir(d);
    }
    if let Some(r) = run.resume {
        trainer.restore(&store, r)?;
    }
    let value = serde_json::to_value(run.config)?;
    let history = training::train(&mut trainer, &model, &store, run.shapes, &value, log, save)?;
    let mut checkpoint = trainer.checkpoint(&store, value)?;
    if let Some(prev) = run.previous {
        checkpoint.meta.insert("ae_hash".into(), serde_json::json!(prev.hash()));
    }
    Ok(StageResult { store, model, checkpoint, history })
}

/// Evaluation surface clouds, one per shape.
pub fn eval_clouds(shapes: &[ProceduralShape], num_points: usize) -> Result<Vec<PointCloud>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| s.sample_surface(num_points, rng::derive_seed(EVAL_SEED, &[rng::name_tag("eval-cloud"), i as u64])))
        .collect()
}

/// Latent means `(count, M, D)` of every shape.
pub fn latent_means(model: &ShapeVae, shapes: &[ProceduralShape]) -> Result<Tensor> {
    let clouds = eval_clouds(shapes, model.config().encoder.num_points)?;
    let parts = clouds
        .chunks(ENCODE_CHUNK)
        .map(|c| Ok(model.latent_mean(c, EVAL_SEED)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

pub struct DiffusionResult {
    pub store: ParamStore,
    pub denoiser: EdmDenoiser,
    pub stats: LatentStats,
    pub checkpoint: Checkpoint,
    pub history: Vec<DiffusionLoss>,
}

/// Trains the denoiser on the standardised latent means of `shapes` under a
/// stage-2 VAE checkpoint.
pub fn train_diffusion(
    cfg: &Config,
    vae_ckpt: &Checkpoint,
    shapes: &[ProceduralShape],
    classes: Option<&[usize]>,
    resume: Option<&Checkpoint>,
    mut log: Option<&mut MetricLog>,
) -> Result<DiffusionResult> {
    vae_ckpt.expect_stage(Stage::Vae.as_str()).map_err(|_| {
        Error::Config(format!(
            "diffusion training needs a vae checkpoint (got stage `{}`); run `train vae` first",
            vae_ckpt.stage
        ))
    })?;
    if let Some(c) = classes {
        if c.len() != shapes.len() {
            return Err(Error::Config(format!("{} class labels for {} shapes", c.len(), shapes.len())));
        }
    }
    let vae = LoadedVae::from_checkpoint(vae_ckpt)?;
    let raw = latent_means(&vae.model, shapes)?;
    let stats = match resume {
        Some(r) => serde_json::from_value(
            r.meta.get("latent_stats").cloned().ok_or_else(|| Error::Data("diffusion checkpoint lacks latent_stats".into()))?,
        )?,
        None => LatentStats::fit(&raw)?,
    };
    let latents = stats.normalize(&raw)?;
    let mut dcfg = cfg.diffusion.denoiser.clone();
    dcfg.sigma_data = stats.sigma_data;
    let store = ParamStore::new(DType::F32, cfg.diffusion.train.seed);
    if let Some(r) = resume {
        r.expect_stage(DIFFUSION_STAGE)?;
        let stored = r.meta.get("vae_hash").and_then(|v| v.as_str()).unwrap_or_default();
        if stored != vae.hash {
            return Err(Error::Config("resumed diffusion checkpoint was trained against a different VAE".into()));
        }
        r.load_params(&store)?;
    }
    let denoiser = EdmDenoiser::new(&store.root(), &dcfg)?;
    let mut trainer = DiffusionTrainer::new(&cfg.diffusion.train)?;
    if let Some(r) = resume {
        trainer.restore(&store, r)?;
    }
    let mut history = Vec::new();
    while trainer.step() < cfg.diffusion.train.steps {
        let rec = trainer.train_step(&denoiser, &store, &latents, classes)?;
        let every = cfg.diffusion.train.log_every.max(1);
        if rec.step % every == 0 || trainer.step() == cfg.diffusion.train.steps {
            if let Some(l) = log.as_deref_mut() {
                l.write(&rec)?;
            }
            log::info!("diffusion step {} loss {:.5}", rec.step, rec.loss);
        }
        history.push(rec);
    }
    let checkpoint = trainer.checkpoint(&store, &dcfg, &stats, &vae.hash)?;
    Ok(DiffusionResult { store, denoiser, stats, checkpoint, history })
}

/// IoU, Chamfer distance and F-score of a reconstructed field and mesh
/// against the procedural reference.
pub fn reconstruction_metrics(
    cfg: &Config,
    field: &OccupancyField,
    mesh: &Mesh,
    reference: &ProceduralShape,
) -> Result<Vec<MetricReport>> {
    let m = &cfg.metrics;
    let iou = metrics::iou_volumetric(field, reference, m.iou_queries, m.seed)?;
    let mut reports = vec![MetricReport::new("iou", serde_json::json!({ "queries": m.iou_queries }), vec![iou])];
    if mesh.is_empty() {
        log::warn!("reconstructed mesh is empty; surface metrics skipped");
        return Ok(reports);
    }
    let a = mesh.sample_surface(m.surface_points, m.seed)?;
    let b = reference.sample_surface(m.surface_points, m.seed)?;
    let cd = metrics::chamfer_distance(a.points(), b.points())?;
    let f1 = metrics::f_score(a.points(), b.points(), m.fscore_threshold)?;
    reports.push(MetricReport::new("chamfer", serde_json::json!({ "points": m.surface_points }), vec![cd]));
    reports.push(MetricReport::new("f_score", serde_json::json!({ "tau": m.fscore_threshold }), vec![f1]));
    Ok(reports)
}
