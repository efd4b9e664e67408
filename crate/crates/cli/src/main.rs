//! `shape-latent` command line: dataset generation, staged training,
//! reconstruction, generation, evaluation and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shape_latent::checkpoint::Checkpoint;
use shape_latent::config::Config;
use shape_latent::diffusion::{self, GenerateOptions, LoadedDiffusion};
use shape_latent::export;
use shape_latent::geometry::{DatasetManifest, Mesh, PointCloud, ProceduralShape};
use shape_latent::metrics::{self, MetricReport};
use shape_latent::model::Stage;
use shape_latent::pipeline::{self, LoadedVae, StageRun};
use shape_latent::training::MetricLog;
use shape_latent::error::write_file;
use shape_latent::{Error, Result};

const MANIFEST: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "shape-latent", version, about = "Compact latent-set shape autoencoder and latent diffusion")]
struct Cli {
    /// TOML configuration file. Values not given fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set training.ae.steps=500`.
    /// Overrides win over the configuration file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Root directory for outputs.
    #[arg(long, global = true, env = "SHAPE_LATENT_OUT", default_value = "runs")]
    out: PathBuf,

    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a manifest of procedural shapes.
    Dataset(DatasetArgs),
    /// Train one stage: ae, then vae, then diffusion.
    Train(TrainArgs),
    /// Reconstruct a shape through a trained autoencoder.
    Reconstruct(ReconstructArgs),
    /// Sample latents with the diffusion model and decode them to meshes.
    Generate(GenerateArgs),
    /// Compare a directory of generated meshes against reference meshes.
    Evaluate(EvaluateArgs),
    /// Export a triplane, occupancy grid or mesh for one shape.
    Export(ExportArgs),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Number of shapes (overrides `dataset.count`).
    #[arg(long)]
    count: Option<usize>,
    /// Seed (overrides `dataset.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<out>/dataset`.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Overwrite a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum TrainStage {
    Ae,
    Vae,
    Diffusion,
}

impl TrainStage {
    fn name(self) -> &'static str {
        match self {
            TrainStage::Ae => "ae",
            TrainStage::Vae => "vae",
            TrainStage::Diffusion => "diffusion",
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    stage: TrainStage,
    /// Dataset directory; defaults to `<out>/dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint of the previous stage; defaults to `<out>/<previous>.ckpt`.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training steps (overrides the stage's `steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Use only the first N shapes of the dataset.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Autoencoder or VAE checkpoint; defaults to `<out>/vae.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Shape id from the dataset manifest.
    #[arg(long, conflicts_with = "cloud")]
    shape: Option<usize>,
    /// Point cloud file: whitespace-separated `x y z` lines, or an OBJ mesh to sample.
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Grid resolution (overrides `extract.resolution`).
    #[arg(long)]
    grid_r: Option<usize>,
    /// Evaluate a 64³ coarse grid first and refine only near the surface.
    #[arg(long)]
    multires: bool,
    /// Output OBJ path; defaults to `<out>/reconstruct/<name>.obj`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Diffusion checkpoint; defaults to `<out>/diffusion.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// VAE checkpoint the latents decode through; defaults to `<out>/vae.ckpt`.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 4)]
    count: usize,
    /// Sampling steps (overrides `diffusion.sampling.steps`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    grid_r: Option<usize>,
    /// Decode through a VAE whose hash differs from the one recorded at training time.
    #[arg(long)]
    force: bool,
    /// Output directory; defaults to `<out>/generated`.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of generated OBJ meshes.
    generated: PathBuf,
    /// Directory of reference OBJ meshes, or a dataset directory with a manifest.
    reference: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ExportKind {
    Triplane,
    Grid,
    Mesh,
}

#[derive(Args, Debug)]
struct ExportArgs {
    kind: ExportKind,
    #[arg(long)]
    shape: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    grid_r: Option<usize>,
    /// Output stem (extension added); defaults to `<out>/export/<kind>_<shape>`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::NotFound(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
        Error::Tensor(_) | Error::Internal(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    match &cli.command {
        Command::Dataset(a) => {
            push_opt(&mut overrides, "dataset.count", a.count);
            push_opt(&mut overrides, "dataset.seed", a.seed);
        }
        Command::Train(a) => {
            let key = match a.stage {
                TrainStage::Ae => "training.ae.steps",
                TrainStage::Vae => "training.vae.steps",
                TrainStage::Diffusion => "diffusion.train.steps",
            };
            push_opt(&mut overrides, key, a.steps);
        }
        Command::Reconstruct(ReconstructArgs { grid_r, .. })
        | Command::Generate(GenerateArgs { grid_r, .. })
        | Command::Export(ExportArgs { grid_r, .. }) => push_opt(&mut overrides, "extract.resolution", *grid_r),
        _ => {}
    }
    if let Command::Generate(GenerateArgs { steps: Some(s), .. }) = &cli.command {
        overrides.push(format!("diffusion.sampling.steps={s}"));
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Dataset(a) => cmd_dataset(cli, &cfg, a),
        Command::Train(a) => cmd_train(cli, &cfg, a),
        Command::Reconstruct(a) => cmd_reconstruct(cli, &cfg, &overrides, a),
        Command::Generate(a) => cmd_generate(cli, &cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cli, &cfg, a),
        Command::Export(a) => cmd_export(cli, &overrides, a),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn push_opt<T: std::fmt::Display>(overrides: &mut Vec<String>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
}

fn dataset_dir(cli: &Cli, dir: &Option<PathBuf>) -> PathBuf {
    dir.clone().unwrap_or_else(|| cli.out.join("dataset"))
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::NotFound(format!(
            "no dataset manifest at {}; run `shape-latent dataset` first",
            path.display()
        )));
    }
    let m = DatasetManifest::load(&path)?;
    m.verify()?;
    Ok(m)
}

fn cmd_dataset(cli: &Cli, cfg: &Config, a: &DatasetArgs) -> Result<()> {
    let dir = dataset_dir(cli, &a.dir);
    let non_empty = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    let manifest = DatasetManifest::generate(cfg.dataset.seed, cfg.dataset.count);
    manifest.save(dir.join(MANIFEST))?;
    println!("wrote {} shapes to {}", manifest.len(), dir.join(MANIFEST).display());
    Ok(())
}

fn default_ckpt(cli: &Cli, given: &Option<PathBuf>, stage: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.out.join(format!("{stage}.ckpt")))
}

fn load_previous(path: &Path, stage: TrainStage, previous: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "stage {} needs a {previous} checkpoint but {} does not exist; run `shape-latent train {previous}` first or pass --from",
            stage.name(),
            path.display()
        )));
    }
    let c = Checkpoint::load(path)?;
    c.expect_stage(previous).map_err(|e| Error::Config(format!("{e}; run `shape-latent train {previous}` first")))?;
    Ok(c)
}

fn cmd_train(cli: &Cli, cfg: &Config, a: &TrainArgs) -> Result<()> {
    let manifest = load_manifest(&dataset_dir(cli, &a.dataset))?;
    let mut shapes = manifest.shapes();
    if let Some(n) = a.limit {
        shapes.truncate(n);
    }
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let mut log = MetricLog::open(cli.out.join(format!("{}.jsonl", a.stage.name())))?;
    let target = cli.out.join(format!("{}.ckpt", a.stage.name()));
    match a.stage {
        TrainStage::Ae | TrainStage::Vae => {
            let stage = if a.stage == TrainStage::Ae { Stage::Ae } else { Stage::Vae };
            let previous = match (stage, &resume) {
                (Stage::Vae, None) => Some(load_previous(&default_ckpt(cli, &a.from, "ae"), a.stage, "ae")?),
                _ => None,
            };
            let run = StageRun {
                config: cfg,
                stage,
                shapes: &shapes,
                previous: previous.as_ref(),
                resume: resume.as_ref(),
                dump_dir: Some(&cli.out),
            };
            let step_path = |c: &Checkpoint| cli.out.join(format!("{}_step{}.ckpt", a.stage.name(), c.step));
            let result = pipeline::train_stage(&run, Some(&mut log), |c| c.save(step_path(c)))?;
            result.checkpoint.save(&target)?;
            let last = result.history.last().map_or(f64::NAN, |t| t.total);
            println!("{} trained to step {} (loss {last:.5}); saved {}", a.stage.name(), result.checkpoint.step, target.display());
        }
        TrainStage::Diffusion => {
            let vae = load_previous(&default_ckpt(cli, &a.from, "vae"), a.stage, "vae")?;
            let result = pipeline::train_diffusion(cfg, &vae, &shapes, None, resume.as_ref(), Some(&mut log))?;
            result.checkpoint.save(&target)?;
            let last = result.history.last().map_or(f64::NAN, |t| t.loss);
            println!("diffusion trained to step {} (loss {last:.5}); saved {}", result.checkpoint.step, target.display());
        }
    }
    Ok(())
}

fn read_cloud(path: &Path, n: usize) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
        return Mesh::from_obj(&text)?.sample_surface(n, pipeline::EVAL_SEED);
    }
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.len() != 3 {
            return Err(Error::Data(format!("{}:{}: expected 3 coordinates", path.display(), i + 1)));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    let cloud = PointCloud::new(pts)?;
    if cloud.len() != n {
        return Err(Error::Config(format!("cloud has {} points but the checkpoint expects encoder.num_points = {n}", cloud.len())));
    }
    Ok(cloud)
}

/// The checkpoint's configuration with the command-line overrides applied
/// to the extraction and metric sections.
fn eval_config(ckpt: &Checkpoint, overrides: &[String]) -> Result<Config> {
    let mut doc: toml::Table = toml::Table::try_from(&pipeline::config_from_checkpoint(ckpt)?)
        .map_err(|e| Error::Internal(e.to_string()))?;
    for o in overrides.iter().filter(|o| o.starts_with("extract.") || o.starts_with("metrics.")) {
        shape_latent::config::apply_override(&mut doc, o)?;
    }
    let text = toml::to_string(&doc).map_err(|e| Error::Internal(e.to_string()))?;
    Config::from_toml(&text, &[])
}

fn cmd_reconstruct(cli: &Cli, _cfg: &Config, overrides: &[String], a: &ReconstructArgs) -> Result<()> {
    let ckpt = Checkpoint::load(default_ckpt(cli, &a.checkpoint, "vae"))?;
    let mut cfg = eval_config(&ckpt, overrides)?;
    if a.multires {
        cfg.extract.coarse_resolution = Some(64.min(cfg.extract.resolution));
    }
    let vae = LoadedVae::from_checkpoint(&ckpt)?;
    let n = cfg.encoder.num_points;
    let (name, cloud, reference): (String, PointCloud, Option<ProceduralShape>) = match (a.shape, &a.cloud) {
        (Some(id), _) => {
            let manifest = load_manifest(&dataset_dir(cli, &a.dataset))?;
            let shape = manifest.get(id)?.shape.clone();
            let cloud = pipeline::eval_clouds(std::slice::from_ref(&shape), n)?.remove(0);
            (format!("shape_{id}"), cloud, Some(shape))
        }
        (None, Some(p)) => {
            let stem = p.file_stem().map_or("cloud".into(), |s| s.to_string_lossy().into_owned());
            (stem, read_cloud(p, n)?, None)
        }
        (None, None) => return Err(Error::Config("pass --shape <id> or --cloud <file>".into())),
    };
    let field = vae.fields(std::slice::from_ref(&cloud))?.remove(0);
    let mesh = cfg.extract.mesh(&field)?;
    let out = a.output.clone().unwrap_or_else(|| cli.out.join("reconstruct").join(format!("{name}.obj")));
    mesh.write_obj(&out)?;
    println!("wrote {} ({} vertices, {} faces)", out.display(), mesh.vertices.len(), mesh.faces.len());
    if let Some(shape) = reference {
        let reports = pipeline::reconstruction_metrics(&cfg, &field, &mesh, &shape)?;
        print!("{}", metrics::format_table(&reports));
        write_file(out.with_extension("metrics.json"), serde_json::to_vec_pretty(&reports)?)?;
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, cfg: &Config, a: &GenerateArgs) -> Result<()> {
    let dckpt = Checkpoint::load(default_ckpt(cli, &a.checkpoint, "diffusion"))?;
    let vckpt = Checkpoint::load(default_ckpt(cli, &a.vae, "vae"))?;
    let loaded = LoadedDiffusion::from_checkpoint(&dckpt, candle_core::DType::F32)?;
    let vae = LoadedVae::from_checkpoint(&vckpt)?;
    loaded.check_vae(&vae.hash, a.force)?;
    let opts = GenerateOptions {
        count: a.count,
        steps: cfg.diffusion.sampling.steps,
        solver: cfg.diffusion.sampling.solver,
        class: a.class,
        seed: a.seed,
        extract: cfg.extract.clone(),
    };
    let generated = diffusion::generate(&vae.model, &loaded.denoiser, &loaded.stats, &opts)?;
    let dir = a.dir.clone().unwrap_or_else(|| cli.out.join("generated"));
    for (i, m) in generated.meshes.iter().enumerate() {
        m.write_obj(dir.join(format!("sample_{i:04}.obj")))?;
    }
    let timing = dir.join("timing.json");
    write_file(&timing, serde_json::to_vec_pretty(&generated.timing)?)?;
    let t = &generated.timing;
    println!(
        "wrote {} meshes to {}\nsampling {:.3}s  decoding {:.3}s  full {:.3}s  ({} denoiser evaluations)",
        generated.meshes.len(),
        dir.display(),
        t.sampling,
        t.decoding,
        t.full,
        t.denoiser_evaluations
    );
    Ok(())
}

fn read_obj_dir(dir: &Path) -> Result<Vec<Mesh>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    paths.iter().map(Mesh::read_obj).collect()
}

fn cmd_evaluate(_cli: &Cli, cfg: &Config, a: &EvaluateArgs) -> Result<()> {
    let n = cfg.metrics.surface_points;
    let seed = cfg.metrics.seed;
    let sample = |m: &Mesh| m.sample_surface(n, seed).map(PointCloud::into_points);
    let generated: Vec<Vec<_>> = read_obj_dir(&a.generated)?.iter().map(sample).collect::<Result<_>>()?;
    let reference: Vec<Vec<_>> = if a.reference.join(MANIFEST).exists() {
        load_manifest(&a.reference)?
            .shapes()
            .iter()
            .map(|s| s.sample_surface(n, seed).map(PointCloud::into_points))
            .collect::<Result<_>>()?
    } else {
        read_obj_dir(&a.reference)?.iter().map(sample).collect::<Result<_>>()?
    };
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Data("both directories must contain at least one mesh".into()));
    }
    let set = metrics::set_metrics(&generated, &reference)?;
    let params = serde_json::json!({ "points": n, "generated": generated.len(), "reference": reference.len() });
    let mut reports = vec![
        MetricReport::new("mmd_cd", params.clone(), vec![set.mmd]),
        MetricReport::new("cov_cd", params.clone(), vec![set.cov]),
    ];
    if let Some(nna) = set.one_nna {
        reports.push(MetricReport::new("1nna_cd", params, vec![nna]));
    }
    print!("{}", metrics::format_table(&reports));
    let path = a.generated.join("evaluation.json");
    write_file(&path, serde_json::to_vec_pretty(&reports)?)
}

fn cmd_export(cli: &Cli, overrides: &[String], a: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(default_ckpt(cli, &a.checkpoint, "vae"))?;
    let cfg = eval_config(&ckpt, overrides)?;
    let vae = LoadedVae::from_checkpoint(&ckpt)?;
    let manifest = load_manifest(&dataset_dir(cli, &a.dataset))?;
    let shape = manifest.get(a.shape)?.shape.clone();
    let cloud = pipeline::eval_clouds(std::slice::from_ref(&shape), cfg.encoder.num_points)?;
    let kind = format!("{:?}", a.kind).to_lowercase();
    let stem = a.output.clone().unwrap_or_else(|| cli.out.join("export").join(format!("{kind}_{}", a.shape)));
    match a.kind {
        ExportKind::Triplane => {
            let out = vae.model.reconstruct(&cloud, vae.stage, pipeline::EVAL_SEED)?;
            let (raw, json) = export::write_triplane(&stem, &out.triplane, 0)?;
            println!("wrote {} and {}", raw.display(), json.display());
        }
        ExportKind::Grid => {
            let field = vae.fields(&cloud)?.remove(0);
            let (raw, json) = export::write_grid(&stem, &cfg.extract.grid(&field)?)?;
            println!("wrote {} and {}", raw.display(), json.display());
        }
        ExportKind::Mesh => {
            let field = vae.fields(&cloud)?.remove(0);
            let path = stem.with_extension("obj");
            cfg.extract.mesh(&field)?.write_obj(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
