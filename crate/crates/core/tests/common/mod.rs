//! Shared test support: straight-line reference math, a central-difference
//! gradient checker, and the cheaper acceptance checks.

#![allow(dead_code)]

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use shape_latent::decoder::{DecoderConfig, TriplaneDecoder};
use shape_latent::diffusion::{
    denoiser_throughput, diffusion_loss, DenoiserConfig, EdmDenoiser,
};
use shape_latent::encoder::{Encoder, EncoderConfig, KlBlock};
use shape_latent::fields::{query_occupancy, uncertainty_at_query, FieldConfig, FieldMlp};
use shape_latent::geometry::{farthest_point_sample_from, Point, PointCloud};
use shape_latent::nn::{scalar, ParamStore};
use shape_latent::training::{bce_with_logits, kl_loss, recon_loss};
use shape_latent::{decoder::Triplane, rng, Result};

/// Outcome of one check, with a one-line summary of what was measured.
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check { passed, detail: detail.into() }
    }
}

pub fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    let mut r = rng::stream(seed, &[rng::name_tag("test-randn")]);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn random_points(n: usize, seed: u64) -> Vec<Point> {
    let mut r = rng::stream(seed, &[rng::name_tag("test-points")]);
    (0..n).map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    scalar(&(a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

// Straight-line reference math on row lists, reading weights by name.

pub struct Reference<'a> {
    pub store: &'a ParamStore,
}

impl Reference<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        self.store.values(name).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    pub fn linear(&self, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        let d_out = b.len();
        let d_in = w.len() / d_out;
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), d_in);
                (0..d_out)
                    .map(|o| b[o] + (0..d_in).map(|i| row[i] * w[i * d_out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(&self, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let g = self.get(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
            })
            .collect()
    }

    pub fn attention(&self, prefix: &str, heads: usize, q: &[Vec<f64>], ctx: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let qs = self.linear(&format!("{prefix}.q"), q);
        let ks = self.linear(&format!("{prefix}.k"), ctx);
        let vs = self.linear(&format!("{prefix}.v"), ctx);
        let c = qs[0].len();
        let d = c / heads;
        let mut out = vec![vec![0.0; c]; q.len()];
        for h in 0..heads {
            let r = h * d..(h + 1) * d;
            for (i, qi) in qs.iter().enumerate() {
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| qi[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, v) in vs.iter().enumerate() {
                    for t in r.clone() {
                        out[i][t] += e[j] / z * v[t];
                    }
                }
            }
        }
        self.linear(&format!("{prefix}.out"), &out)
    }

    pub fn mlp(&self, prefix: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h: Vec<Vec<f64>> = self
            .linear(&format!("{prefix}.fc1"), x)
            .into_iter()
            .map(|row| row.into_iter().map(gelu).collect())
            .collect();
        self.linear(&format!("{prefix}.fc2"), &h)
    }

    pub fn self_block(&self, prefix: &str, heads: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.layer_norm(&format!("{prefix}.norm1"), x);
        let x = add(x, &self.attention(&format!("{prefix}.attn"), heads, &n, &n));
        let y = self.mlp(&format!("{prefix}.mlp"), &self.layer_norm(&format!("{prefix}.norm2"), &x));
        add(&x, &y)
    }

    pub fn cross_block(&self, prefix: &str, heads: usize, x: &[Vec<f64>], ctx: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let q = self.layer_norm(&format!("{prefix}.norm_q"), x);
        let kv = self.layer_norm(&format!("{prefix}.norm_kv"), ctx);
        let x = add(x, &self.attention(&format!("{prefix}.attn"), heads, &q, &kv));
        let y = self.mlp(&format!("{prefix}.mlp"), &self.layer_norm(&format!("{prefix}.norm2"), &x));
        add(&x, &y)
    }

    /// `H' = SelfAttn³(CrossAttn(H, G))` with a CLS row, `F' = SelfAttn(CrossAttn(F, H'))`,
    /// `G' = CrossAttn(G, F')`.
    pub fn encoder_block(
        &self,
        prefix: &str,
        heads: usize,
        g: &[Vec<f64>],
        h: &[Vec<f64>],
        f: &[Vec<f64>],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut hc = self.cross_block(&format!("{prefix}.patch_cross"), heads, h, g);
        hc.push(self.get(&format!("{prefix}.cls")));
        for i in 0..3 {
            hc = self.self_block(&format!("{prefix}.patch_self.{i}"), heads, &hc);
        }
        hc.pop();
        let f2 = self.cross_block(&format!("{prefix}.latent_cross"), heads, f, &hc);
        let f2 = self.self_block(&format!("{prefix}.latent_self"), heads, &f2);
        let g2 = self.cross_block(&format!("{prefix}.point_cross"), heads, g, &f2);
        (g2, hc, f2)
    }
}

/// Tanh-form GELU, `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn rows_max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs())).fold(0.0, f64::max)
}

// Finite differences.

/// Largest relative error between autodiff and central differences over the
/// chosen entries of `var`. Entries where both gradients are below `floor`
/// count as agreeing only if their difference is also below `floor`.
pub fn gradient_error(
    var: &Var,
    entries: &[usize],
    eps: f64,
    analytic: &Tensor,
    mut loss: impl FnMut() -> f64,
) -> f64 {
    let floor = 1e-9;
    let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let grad: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
    let shape = var.as_tensor().shape().clone();
    let mut worst: f64 = 0.0;
    for &i in entries {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        var.set(&Tensor::from_vec(v.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
        let up = loss();
        v[i] = base[i] - eps;
        var.set(&Tensor::from_vec(v, &shape, &Device::Cpu).unwrap()).unwrap();
        let down = loss();
        let numeric = (up - down) / (2.0 * eps);
        let a = grad[i];
        let err = if a.abs().max(numeric.abs()) < floor {
            if (a - numeric).abs() < floor { 0.0 } else { f64::INFINITY }
        } else {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        };
        worst = worst.max(err);
    }
    var.set(&Tensor::from_vec(base, &shape, &Device::Cpu).unwrap()).unwrap();
    worst
}

fn pick(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, &[rng::name_tag("test-pick")]);
    (0..k).map(|_| r.gen_range(0..n)).collect()
}

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
const FD_EPS: f64 = 1e-6;

/// Mean occupancy logit over random queries, differentiated with respect to
/// the triplane texels that the queries touch.
pub fn field_texel_gradient() -> Result<f64> {
    let store = ParamStore::new(DType::F64, 3);
    let (res, ch) = (6, 4);
    let mlp = FieldMlp::new(&store.scope("field"), ch, &FieldConfig::default())?;
    let planes = Var::from_tensor(&randn(&[1, 3, res, res, ch], 1, DType::F64))?;
    let queries = vec![random_points(24, 2)];
    let eval = |planes: &Tensor| -> Result<Tensor> {
        Ok(query_occupancy(&mlp, &Triplane { planes: planes.clone() }, &queries)?.mean_all()?)
    };
    let grads = eval(planes.as_tensor())?.backward()?;
    let g = grads.get(planes.as_tensor()).expect("texel gradient").clone();
    let hv: Vec<f64> = g.flatten_all()?.to_vec1()?;
    let mut entries: Vec<usize> = (0..hv.len()).filter(|&i| hv[i] != 0.0).take(20).collect();
    entries.extend(pick(hv.len(), 10, 3));
    Ok(gradient_error(&planes, &entries, FD_EPS, &g, || scalar(&eval(planes.as_tensor()).unwrap()).unwrap()))
}

/// A fixed random projection of `(mu, logvar)` differentiated with respect
/// to ten input coordinates, anchors held fixed.
pub fn encoder_coordinate_gradient() -> Result<f64> {
    let store = ParamStore::new(DType::F64, 5);
    let cfg = EncoderConfig {
        num_points: 32,
        num_patches: 8,
        num_latents: 4,
        width: 16,
        latent_channels: 4,
        num_blocks: 1,
        num_heads: 2,
        embed_frequencies: 8,
        ..Default::default()
    };
    let enc = Encoder::new(&store.scope("encoder"), &cfg)?;
    let kl = KlBlock::new(&store.scope("kl"), cfg.width, cfg.latent_channels)?;
    let cloud = PointCloud::new(random_points(cfg.num_points, 7).into_iter().map(|p| p.map(|c| c * 0.8)).collect())?;
    let anchors = vec![enc.anchors(&cloud, 0)?];
    let coords = Var::from_tensor(&enc.clouds_tensor(&[cloud])?)?;
    let wm = randn(&[1, cfg.num_latents, cfg.latent_channels], 8, DType::F64);
    let wl = randn(&[1, cfg.num_latents, cfg.latent_channels], 9, DType::F64);
    let eval = |x: &Tensor| -> Result<Tensor> {
        let (mu, logvar) = kl.forward(&enc.encode_with_anchors(x, &anchors)?)?;
        Ok((mu.mul(&wm)?.sum_all()? + logvar.mul(&wl)?.sum_all()?)?)
    };
    let grads = eval(coords.as_tensor())?.backward()?;
    let g = grads.get(coords.as_tensor()).expect("coordinate gradient").clone();
    let entries = pick(cfg.num_points * 3, 10, 10);
    Ok(gradient_error(&coords, &entries, FD_EPS, &g, || scalar(&eval(coords.as_tensor()).unwrap()).unwrap()))
}

/// The weighted denoising loss on a batch of two 2×2 latents, differentiated
/// with respect to one entry of every denoiser parameter tensor.
pub fn diffusion_parameter_gradient() -> Result<f64> {
    let store = ParamStore::new(DType::F64, 11);
    let cfg = DenoiserConfig {
        num_layers: 1,
        width: 8,
        num_heads: 2,
        num_latents: 2,
        latent_channels: 2,
        num_classes: 3,
        ..Default::default()
    };
    let den = EdmDenoiser::new(&store.root(), &cfg)?;
    // Zero-initialised tables start with a dead gradient path; give every
    // parameter a generic value.
    for (name, var) in store.all() {
        let t = randn(var.dims(), rng::name_tag(&name), DType::F64);
        var.set(&(t * 0.3)?)?;
    }
    let z0 = randn(&[2, 2, 2], 12, DType::F64);
    let noise = randn(&[2, 2, 2], 13, DType::F64);
    let sigmas = [0.4, 2.5];
    let eval = || diffusion_loss(&den, &z0, &noise, &sigmas, cfg.sigma_data, Some(1));
    let grads = eval()?.backward()?;
    let mut worst: f64 = 0.0;
    for (k, (name, var)) in store.all().into_iter().enumerate() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .clone();
        let entries = pick(var.elem_count(), 1, k as u64);
        worst = worst.max(gradient_error(&var, &entries, FD_EPS, &g, || scalar(&eval().unwrap()).unwrap()));
    }
    Ok(worst)
}

/// Triplane assembly differentiated with respect to both projections and
/// the uncertainty logits.
pub fn assembly_gradient() -> Result<f64> {
    let store = ParamStore::new(DType::F64, 17);
    let cfg = DecoderConfig {
        resolution: 8,
        patch_size: 2,
        width: 8,
        triplane_channels: 2,
        num_layers: 1,
        latent_layers: 1,
        num_heads: 2,
        num_merged: 2,
        ..Default::default()
    };
    let dec = TriplaneDecoder::new(&store.scope("decoder"), &cfg)?;
    let t = cfg.num_tokens();
    let initial = randn(&[1, t, cfg.width], 18, DType::F64);
    let kept = vec![(0..t).filter(|i| i % 3 != 1).collect::<Vec<_>>()];
    let processed = randn(&[1, kept[0].len(), cfg.width], 19, DType::F64);
    let logits = Var::from_tensor(&randn(&[1, t], 20, DType::F64))?;
    let probe = randn(&[1, 3, cfg.resolution, cfg.resolution, cfg.triplane_channels], 21, DType::F64);
    let eval = |l: &Tensor| -> Result<Tensor> {
        let (_, tp) = dec.assemble(&initial, &processed, &kept, l)?;
        Ok(tp.planes.mul(&probe)?.sum_all()?)
    };
    let grads = eval(logits.as_tensor())?.backward()?;
    let mut worst: f64 = 0.0;
    let g = grads.get(logits.as_tensor()).expect("logit gradient").clone();
    worst = worst.max(gradient_error(&logits, &pick(t, 10, 22), FD_EPS, &g, || {
        scalar(&eval(logits.as_tensor()).unwrap()).unwrap()
    }));
    for name in ["decoder.base_proj.weight", "decoder.delta_proj.weight", "decoder.delta_proj.bias"] {
        let var = store.var(name).unwrap();
        let g = grads.get(var.as_tensor()).expect("projection gradient").clone();
        worst = worst.max(gradient_error(&var, &pick(var.elem_count(), 10, 23), FD_EPS, &g, || {
            scalar(&eval(logits.as_tensor()).unwrap()).unwrap()
        }));
    }
    Ok(worst)
}

pub fn gradient_checks() -> Result<Check> {
    let a = field_texel_gradient()?;
    let b = encoder_coordinate_gradient()?;
    let c = diffusion_parameter_gradient()?;
    let ok = [a, b, c].iter().all(|e| *e < GRADIENT_TOLERANCE);
    Ok(Check::new(ok, format!("max rel err: texels {a:.2e}, coordinates {b:.2e}, denoiser params {c:.2e} (tol 1e-3)")))
}

// Uncertainty retrieval oracle.

/// Scalar `u(q)`: the product over planes of bilinearly interpolated sigmoid
/// logits, written with explicit corner weights.
pub fn uncertainty_reference(planes: &[Vec<f64>], grid: usize, q: Point) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let uv = [(q[0], q[1]), (q[1], q[2]), (q[0], q[2])];
    let mut u = 1.0;
    for (plane, (a, b)) in planes.iter().zip(uv) {
        let pos = |t: f64| (t.clamp(-1.0, 1.0) + 1.0) / 2.0 * (grid - 1) as f64;
        let (x, y) = (pos(a), pos(b));
        let (x0, y0) = ((x.floor() as usize).min(grid - 2), (y.floor() as usize).min(grid - 2));
        let (wx, wy) = (x - x0 as f64, y - y0 as f64);
        let at = |r: usize, c: usize| sig(plane[r * grid + c]);
        u *= (1.0 - wx) * (1.0 - wy) * at(y0, x0)
            + wx * (1.0 - wy) * at(y0, x0 + 1)
            + (1.0 - wx) * wy * at(y0 + 1, x0)
            + wx * wy * at(y0 + 1, x0 + 1);
    }
    u
}

pub fn uncertainty_oracle(cases: usize) -> Result<Check> {
    let mut r = rng::stream(31, &[rng::name_tag("uncertainty-cases")]);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let grid = r.gen_range(2..9);
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..grid * grid).map(|_| { let n: f64 = StandardNormal.sample(&mut r); 3.0 * n }).collect())
            .collect();
        // A few queries leave the cube to exercise clamping.
        let q: Point = [r.gen_range(-1.1..1.1), r.gen_range(-1.1..1.1), r.gen_range(-1.1..1.1)];
        let flat: Vec<f64> = planes.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (1, 3, grid, grid), &Device::Cpu)?;
        let got = scalar(&uncertainty_at_query(&t, &[vec![q]])?)?;
        let want = uncertainty_reference(&planes, grid, q);
        worst = worst.max((got - want).abs());
    }
    let zeros = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu)?;
    let zq = vec![random_points(50, 32)];
    let z: Vec<f32> = uncertainty_at_query(&zeros, &zq)?.flatten_all()?.to_vec1()?;
    let exact = z.iter().all(|&v| v == 0.125);
    Ok(Check::new(
        worst < 1e-6 && exact,
        format!("{cases} cases, max |diff| {worst:.2e} (tol 1e-6); all-zero logits exactly 0.125: {exact}"),
    ))
}

// Farthest-point sampling oracle.

/// Quadratic-time FPS: at each step recompute every candidate's distance to
/// the whole selected set and take the farthest, lowest index on ties.
pub fn fps_reference(points: &[Point], k: usize, start: usize) -> Vec<usize> {
    let d2 = |a: Point, b: Point| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut sel = vec![start];
    while sel.len() < k {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &p) in points.iter().enumerate() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| d2(p, points[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.expect("candidate left"));
    }
    sel
}

pub fn fps_oracle(sets: usize) -> Result<Check> {
    let mut r = rng::stream(41, &[rng::name_tag("fps-sets")]);
    let mut mismatches = 0;
    for s in 0..sets {
        let n = r.gen_range(1..=256);
        // Every fifth set sits on a coarse lattice so distance ties occur.
        let points: Vec<Point> = if s % 5 == 0 {
            (0..n).map(|_| [0, 0, 0].map(|_: i32| r.gen_range(0..4) as f64 * 0.5 - 0.75)).collect()
        } else {
            (0..n).map(|_| [0, 0, 0].map(|_: i32| r.gen_range(-1.0..1.0))).collect()
        };
        let k = r.gen_range(1..=n);
        let start = r.gen_range(0..n);
        if farthest_point_sample_from(&points, k, start)? != fps_reference(&points, k, start) {
            mismatches += 1;
        }
    }
    Ok(Check::new(mismatches == 0, format!("{sets} sets with N <= 256, {mismatches} mismatches")))
}

// Closed-form loss values.

pub fn analytic_losses() -> Result<Check> {
    let dev = Device::Cpu;
    let z = Tensor::zeros(1, DType::F64, &dev)?;
    let bce1 = scalar(&bce_with_logits(&z, &Tensor::ones(1, DType::F64, &dev)?)?)?;
    let bce0 = scalar(&bce_with_logits(&z, &z)?)?;
    let ln2 = std::f64::consts::LN_2;
    let kl = scalar(&kl_loss(&Tensor::ones((4, 3), DType::F64, &dev)?, &Tensor::zeros((4, 3), DType::F64, &dev)?)?)?;
    let labels = Tensor::from_vec((0..200).map(|i| (i % 3 == 0) as u8 as f64).collect::<Vec<_>>(), 200, &dev)?;
    let near: Vec<bool> = (0..200).map(|i| i >= 120).collect();
    let rl = scalar(&recon_loss(&Tensor::zeros(200, DType::F64, &dev)?, &labels, &near, 0.1)?)?;
    // The stated target 0.6931·1.1 is ln 2 · (1 + near_weight) rounded.
    let target = ln2 * 1.1;
    let ok = (bce1 - ln2).abs() <= 1e-9 && (bce0 - ln2).abs() <= 1e-9 && (kl - 0.5).abs() <= 1e-9 && (rl - target).abs() <= 1e-6;
    Ok(Check::new(
        ok,
        format!("BCE(0) = {bce0:.12}, KL(1, 0) = {kl:.12}, recon(0) = {rl:.9} vs ln2·1.1 = {target:.9}"),
    ))
}

// Pruning.

pub fn pruning_noop(cases: usize) -> Result<Check> {
    let store = ParamStore::new(DType::F32, 51);
    let cfg = DecoderConfig::default();
    let dec = TriplaneDecoder::new(&store.scope("decoder"), &cfg)?;
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let f = randn(&[1, 32, cfg.width], 100 + i as u64, DType::F32);
        let pruned = dec.forward_with_ratio(&f, 1.0)?.triplane.planes;
        let plain = dec.forward_unpruned(&f)?.planes;
        worst = worst.max(max_abs_diff(&pruned, &plain));
    }
    Ok(Check::new(worst <= 1e-6, format!("{cases} inputs, max |diff| {worst:.2e} (tol 1e-6)")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Median wall-clock of the decoder transformer at R=128, f=8 for each keep
/// ratio, in seconds.
pub fn transform_timings(ratios: &[f64], runs: usize) -> Result<Vec<f64>> {
    let store = ParamStore::new(DType::F32, 61);
    let cfg = DecoderConfig { resolution: 128, patch_size: 8, ..Default::default() };
    let dec = TriplaneDecoder::new(&store.scope("decoder"), &cfg)?;
    let f = randn(&[1, 32, cfg.width], 62, DType::F32);
    let merged = randn(&[1, cfg.num_merged, cfg.width], 63, DType::F32);
    let t = cfg.num_tokens();
    ratios
        .iter()
        .map(|&r| {
            let k = shape_latent::decoder::kept_count(t, r);
            let kept = randn(&[1, k, cfg.width], 64, DType::F32);
            dec.transform(&kept, &f, &merged)?;
            let times = (0..runs)
                .map(|_| {
                    let s = Instant::now();
                    dec.transform(&kept, &f, &merged)?;
                    Ok(s.elapsed().as_secs_f64())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(median(times))
        })
        .collect()
}

pub fn pruning_cost() -> Result<Check> {
    let ratios = [1.0, 0.5, 0.25, 0.1];
    let t = transform_timings(&ratios, 20)?;
    let ok = t.windows(2).all(|w| w[1] <= w[0]);
    let cells: Vec<String> = ratios.iter().zip(&t).map(|(r, s)| format!("{:.0}%: {:.1} ms", r * 100.0, s * 1e3)).collect();
    Ok(Check::new(ok, format!("median of 20 at R=128, f=8: {}", cells.join(", "))))
}

// Compression and throughput.

pub fn compression_ratio() -> Result<Check> {
    let ours = EncoderConfig { num_latents: 64, latent_channels: 32, ..EncoderConfig::full_scale() };
    let baseline = EncoderConfig { num_patches: 1024, num_latents: 1024, latent_channels: 32, ..EncoderConfig::full_scale() };
    ours.validate()?;
    baseline.validate()?;
    let (a, b) = (ours.latent_size(), baseline.latent_size());
    let ok = a == 2048 && b == 32768 && b % a == 0 && b / a == 16;
    Ok(Check::new(ok, format!("M=64, D=32: {a} scalars; M=1024: {b}; ratio {}", b as f64 / a as f64)))
}

pub fn throughput_order() -> Result<Check> {
    let mut rates = Vec::new();
    for m in [64, 256, 512] {
        let store = ParamStore::new(DType::F32, 71);
        let cfg = DenoiserConfig { num_latents: m, ..Default::default() };
        let den = EdmDenoiser::new(&store.root(), &cfg)?;
        rates.push(denoiser_throughput(&den, 4, 7)?);
    }
    let ok = rates[0] > rates[1] && rates[1] > rates[2];
    Ok(Check::new(
        ok,
        format!("samples/s (median of 7): M=64 {:.1}, M=256 {:.1}, M=512 {:.1}", rates[0], rates[1], rates[2]),
    ))
}
