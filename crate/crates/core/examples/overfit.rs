//! Overfits the autoencoder on a few procedural shapes and prints volumetric
//! IoU as training progresses.
//!
//! ```text
//! cargo run --release -p shape-latent --example overfit -- 8 1500
//! ```

use std::time::Instant;

use candle_core::DType;
use shape_latent::geometry::{uniform_cube_points, ProceduralShape};
use shape_latent::model::{ModelConfig, ShapeVae, Stage};
use shape_latent::nn::ParamStore;
use shape_latent::training::{TrainConfig, Trainer};

fn main() -> shape_latent::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let count = args.first().copied().unwrap_or(8);
    let steps = args.get(1).copied().unwrap_or(1000) as u64;
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(count);
    let q: usize = std::env::var("QUERIES").ok().and_then(|v| v.parse().ok()).unwrap_or(2048);
    let shapes: Vec<ProceduralShape> = (0..count as u64).map(ProceduralShape::random).collect();
    let cfg = ModelConfig::overfit();
    let store = ParamStore::new(DType::F32, 0);
    let model = ShapeVae::for_stage(&store, &cfg, Stage::Ae)?;
    let mut tc = TrainConfig { steps, batch_size: batch, n_vol: q, n_near: q, ..Default::default() };
    tc.lr.base = lr;
    tc.lr.warmup_steps = 50;
    tc.lr.milestones = vec![steps * 7 / 10, steps * 9 / 10];
    let mut trainer = Trainer::new(&tc, Stage::Ae)?;
    let probe = uniform_cube_points(20_000, 99);
    let t0 = Instant::now();
    for s in 0..steps {
        let terms = trainer.train_step(&model, &store, &shapes)?;
        if s % 50 == 0 || s + 1 == steps {
            let clouds: Vec<_> = shapes.iter().map(|sh| sh.sample_surface(cfg.encoder.num_points, 7).unwrap()).collect();
            let out = model.reconstruct(&clouds, Stage::Ae, 0)?;
            let mut ious = Vec::new();
            for (i, sh) in shapes.iter().enumerate() {
                let f = model.occupancy_field(&out.triplane, i)?;
                let pred = f.occupancy(&probe, 0.5);
                let (mut inter, mut uni) = (0, 0);
                for (p, &o) in probe.iter().zip(&pred) {
                    let g = sh.contains(*p);
                    inter += (g && o) as usize;
                    uni += (g || o) as usize;
                }
                ious.push(inter as f64 / uni.max(1) as f64);
            }
            let mean = ious.iter().sum::<f64>() / ious.len() as f64;
            println!(
                "step {s:5} t={:7.1}s loss {:.4} final {:.4} base {:.4} unc {:.4} iou {:.4} min {:.4}",
                t0.elapsed().as_secs_f64(),
                terms.total,
                terms.recon_final,
                terms.recon_base,
                terms.uncertainty,
                mean,
                ious.iter().cloned().fold(1.0, f64::min)
            );
        }
    }
    Ok(())
}
