//! Triplane decoder with uncertainty-guided token pruning.
//!
//! A plane of resolution `R` is cut into `(R/f)²` patches of `f×f` pixels and
//! each patch is one token. Tokens are numbered plane-major, then row-major
//! within a plane; planes come in the order xy, yz, xz.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{gather_rows, sigmoid, CrossAttentionBlock, Init, Linear, Params, SelfAttentionBlock};

pub const PLANE_NAMES: [&str; 3] = ["xy", "yz", "xz"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Triplane resolution (R).
    pub resolution: usize,
    /// Patch size (f); one token covers `f×f` pixels.
    pub patch_size: usize,
    /// Token width (C); must equal the encoder width.
    pub width: usize,
    /// Triplane feature channels.
    pub triplane_channels: usize,
    /// Transformer blocks over the kept tokens.
    pub num_layers: usize,
    /// Self-attention blocks in the latent decoder.
    pub latent_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub keep_ratio: f64,
    pub num_merged: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            resolution: 64,
            patch_size: 8,
            width: 256,
            triplane_channels: 32,
            num_layers: 6,
            latent_layers: 2,
            num_heads: 8,
            mlp_ratio: 4,
            keep_ratio: 0.25,
            num_merged: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.resolution == 0 || self.resolution % self.patch_size != 0 {
            return fail(format!(
                "decoder.resolution ({}) must be a positive multiple of decoder.patch_size ({})",
                self.resolution, self.patch_size
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return fail(format!("decoder.keep_ratio ({}) must lie in (0, 1]", self.keep_ratio));
        }
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return fail(format!(
                "decoder.width ({}) must be divisible by decoder.num_heads ({})",
                self.width, self.num_heads
            ));
        }
        if self.num_merged == 0 || self.triplane_channels == 0 || self.mlp_ratio == 0 {
            return fail("decoder.num_merged, triplane_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Tokens per plane side, `R/f`.
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    /// Total token count `3·(R/f)²`.
    pub fn num_tokens(&self) -> usize {
        3 * self.grid() * self.grid()
    }

    pub fn num_kept(&self) -> usize {
        kept_count(self.num_tokens(), self.keep_ratio)
    }
}

/// Plane, row and column of token `t` on a `grid × grid` token layout.
pub fn token_cell(t: usize, grid: usize) -> (usize, usize, usize) {
    (t / (grid * grid), (t / grid) % grid, t % grid)
}

pub fn cell_token(plane: usize, row: usize, col: usize, grid: usize) -> usize {
    (plane * grid + row) * grid + col
}

pub fn kept_count(total: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * total as f64).round() as usize).min(total)
}

/// Splits token indices into the `round(keep_ratio·T)` highest logits and the
/// rest. Ties go to the lower index; both lists come back sorted.
pub fn prune_tokens(logits: &[f64], keep_ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(invalid!("keep_ratio {keep_ratio} outside [0, 1]"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN uncertainty logit".into()));
    }
    let k = kept_count(logits.len(), keep_ratio);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut kept = order[..k].to_vec();
    let mut pruned = order[k..].to_vec();
    kept.sort_unstable();
    pruned.sort_unstable();
    Ok((kept, pruned))
}

/// Dense `(batch, T, width)` tensor holding `rows[b][j]` at token `kept[b][j]`
/// and zeros elsewhere.
pub fn scatter_tokens(rows: &Tensor, kept: &[Vec<usize>], num_tokens: usize) -> Result<Tensor> {
    let (b, k, c) = rows.dims3()?;
    if kept.len() != b || kept.iter().any(|v| v.len() != k) {
        return Err(invalid!("scatter_tokens: index lists do not match rows {:?}", rows.dims()));
    }
    let zero_row = (b * k) as u32;
    let mut map = vec![zero_row; b * num_tokens];
    for (bi, idx) in kept.iter().enumerate() {
        for (j, &t) in idx.iter().enumerate() {
            if t >= num_tokens {
                return Err(invalid!("kept index {t} out of range {num_tokens}"));
            }
            let slot = &mut map[bi * num_tokens + t];
            if *slot != zero_row {
                return Err(invalid!("duplicate kept index {t}"));
            }
            *slot = (bi * k + j) as u32;
        }
    }
    let source = Tensor::cat(
        &[rows.reshape((b * k, c))?, Tensor::zeros((1, c), rows.dtype(), rows.device())?],
        0,
    )?;
    let ids = Tensor::from_vec(map, b * num_tokens, rows.device())?;
    Ok(source.index_select(&ids, 0)?.reshape((b, num_tokens, c))?)
}

/// Dense triplane features, `(batch, 3, R, R, channels)`; plane order xy, yz,
/// xz, rows indexed by the second plane coordinate.
#[derive(Clone, Debug)]
pub struct Triplane {
    pub planes: Tensor,
}

impl Triplane {
    /// Unpacks `(batch, T, f·f·channels)` token features into planes.
    pub fn from_tokens(tokens: &Tensor, grid: usize, patch: usize) -> Result<Self> {
        let (b, t, fc) = tokens.dims3()?;
        if t != 3 * grid * grid || fc % (patch * patch) != 0 {
            return Err(invalid!("token tensor {:?} does not match grid {grid}, patch {patch}", tokens.dims()));
        }
        let ct = fc / (patch * patch);
        let r = grid * patch;
        let planes = tokens
            .reshape(vec![b, 3, grid, grid, patch, patch, ct])?
            .permute(vec![0, 1, 2, 4, 3, 5, 6])?
            .reshape((b, 3, r, r, ct))?;
        Ok(Triplane { planes })
    }

    pub fn batch(&self) -> usize {
        self.planes.dims()[0]
    }

    pub fn resolution(&self) -> usize {
        self.planes.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.planes.dims()[4]
    }

    /// Planes of one batch element, `(3, R, R, channels)`.
    pub fn sample(&self, b: usize) -> Result<Triplane> {
        Ok(Triplane { planes: self.planes.narrow(0, b, 1)? })
    }
}

/// `z -> F'`: channel expansion followed by self-attention.
#[derive(Clone, Debug)]
pub struct LatentDecoder {
    proj: Linear,
    blocks: Vec<SelfAttentionBlock>,
}

impl LatentDecoder {
    pub fn new(p: &Params, latent_channels: usize, cfg: &DecoderConfig) -> Result<Self> {
        Ok(LatentDecoder {
            proj: Linear::new(&p.pp("proj"), latent_channels, cfg.width)?,
            blocks: (0..cfg.latent_layers)
                .map(|i| SelfAttentionBlock::new(&p.pp(&format!("blocks.{i}")), cfg.width, cfg.num_heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.proj.forward(z)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// Everything the decoder produces for one batch.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub initial_tokens: Tensor,
    /// `(batch, T)` uncertainty logits.
    pub logits: Tensor,
    pub kept: Vec<Vec<usize>>,
    pub pruned: Vec<Vec<usize>>,
    /// Triplane projected from the initial tokens only.
    pub base: Triplane,
    /// Final triplane after the transformer and weighted assembly.
    pub triplane: Triplane,
}

impl DecoderOutput {
    /// Uncertainty logits laid out as `(batch, 3, R/f, R/f)`.
    pub fn logit_planes(&self, grid: usize) -> Result<Tensor> {
        let b = self.logits.dims()[0];
        Ok(self.logits.reshape((b, 3, grid, grid))?)
    }
}

#[derive(Clone, Debug)]
pub struct TriplaneDecoder {
    cfg: DecoderConfig,
    tokens: Tensor,
    init: CrossAttentionBlock,
    unc_hidden: Linear,
    unc_out: Linear,
    merge_queries: Tensor,
    merge: CrossAttentionBlock,
    mask_token: Tensor,
    layers: Vec<SelfAttentionBlock>,
    base_proj: Linear,
    delta_proj: Linear,
}

impl TriplaneDecoder {
    pub fn new(p: &Params, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let out = cfg.patch_size * cfg.patch_size * cfg.triplane_channels;
        Ok(TriplaneDecoder {
            cfg: cfg.clone(),
            tokens: p.get("tokens", &[1, cfg.num_tokens(), c], Init::Normal(0.02))?,
            init: CrossAttentionBlock::new(&p.pp("init"), c, cfg.num_heads, cfg.mlp_ratio)?,
            unc_hidden: Linear::new(&p.pp("uncertainty.hidden"), c, c / 2)?,
            unc_out: Linear::new(&p.pp("uncertainty.out"), c / 2, 1)?,
            merge_queries: p.get("merge_queries", &[1, cfg.num_merged, c], Init::Normal(0.02))?,
            merge: CrossAttentionBlock::new(&p.pp("merge"), c, cfg.num_heads, cfg.mlp_ratio)?,
            mask_token: p.get("mask_token", &[1, 1, c], Init::Normal(0.02))?,
            layers: (0..cfg.num_layers)
                .map(|i| SelfAttentionBlock::new(&p.pp(&format!("layers.{i}")), c, cfg.num_heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            base_proj: Linear::new(&p.pp("base_proj"), c, out)?,
            delta_proj: Linear::new(&p.pp("delta_proj"), c, out)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Learned token embeddings queried against `F'`.
    pub fn init_tokens(&self, f_prime: &Tensor) -> Result<Tensor> {
        let (b, _, c) = f_prime.dims3()?;
        let e = self.tokens.broadcast_as((b, self.cfg.num_tokens(), c))?.contiguous()?;
        self.init.forward(&e, f_prime)
    }

    /// `(batch, T, C)` tokens to `(batch, T)` logits.
    pub fn predict_uncertainty(&self, tokens: &Tensor) -> Result<Tensor> {
        let h = crate::nn::gelu(&self.unc_hidden.forward(tokens)?)?;
        Ok(self.unc_out.forward(&h)?.squeeze(candle_core::D::Minus1)?)
    }

    /// Learned queries attending over the pruned tokens. With nothing pruned
    /// the queries themselves are returned.
    pub fn merge_pruned(&self, pruned_tokens: &Tensor) -> Result<Tensor> {
        let (b, p, c) = pruned_tokens.dims3()?;
        let q = self.merge_queries.broadcast_as((b, self.cfg.num_merged, c))?.contiguous()?;
        if p == 0 {
            return Ok(q);
        }
        self.merge.forward(&q, pruned_tokens)
    }

    /// Runs `(kept + mask) ‖ F' ‖ merged` through the transformer and returns
    /// the kept-token rows.
    pub fn transform(&self, kept_tokens: &Tensor, f_prime: &Tensor, merged: &Tensor) -> Result<Tensor> {
        let (b, k, c) = kept_tokens.dims3()?;
        let x = kept_tokens.broadcast_add(&self.mask_token)?;
        let mut seq = Tensor::cat(&[x, f_prime.clone(), merged.clone()], 1)?;
        if seq.dims3()?.2 != c || seq.dims()[0] != b {
            return Err(invalid!("transform inputs disagree in batch or width"));
        }
        for l in &self.layers {
            seq = l.forward(&seq)?;
        }
        Ok(seq.narrow(1, 0, k)?)
    }

    /// `base(initial) + sigmoid(logits) ⊙ scatter(delta(processed))`.
    pub fn assemble(
        &self,
        initial_tokens: &Tensor,
        processed: &Tensor,
        kept: &[Vec<usize>],
        logits: &Tensor,
    ) -> Result<(Triplane, Triplane)> {
        let t = self.cfg.num_tokens();
        let base_tokens = self.base_proj.forward(initial_tokens)?;
        let base = Triplane::from_tokens(&base_tokens, self.cfg.grid(), self.cfg.patch_size)?;
        if kept.iter().all(|k| k.is_empty()) {
            return Ok((base.clone(), base));
        }
        let delta = scatter_tokens(&self.delta_proj.forward(processed)?, kept, t)?;
        let w = sigmoid(logits)?.unsqueeze(2)?;
        let full = (base_tokens + delta.broadcast_mul(&w)?)?;
        Ok((base, Triplane::from_tokens(&full, self.cfg.grid(), self.cfg.patch_size)?))
    }

    pub fn forward(&self, f_prime: &Tensor) -> Result<DecoderOutput> {
        self.forward_with_ratio(f_prime, self.cfg.keep_ratio)
    }

    pub fn forward_with_ratio(&self, f_prime: &Tensor, keep_ratio: f64) -> Result<DecoderOutput> {
        let initial = self.init_tokens(f_prime)?;
        let logits = self.predict_uncertainty(&initial)?;
        let host = logits.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut kept = Vec::with_capacity(host.len());
        let mut pruned = Vec::with_capacity(host.len());
        for row in &host {
            let (k, p) = prune_tokens(row, keep_ratio)?;
            kept.push(k);
            pruned.push(p);
        }
        let (base, triplane) = if kept[0].is_empty() {
            self.assemble(&initial, &initial, &kept, &logits)?
        } else {
            let kept_tokens = gather_rows(&initial, &kept)?;
            let merged = self.merge_pruned(&gather_rows(&initial, &pruned)?)?;
            let processed = self.transform(&kept_tokens, f_prime, &merged)?;
            self.assemble(&initial, &processed, &kept, &logits)?
        };
        Ok(DecoderOutput { initial_tokens: initial, logits, kept, pruned, base, triplane })
    }

    /// Reference path without any gather or scatter: every token goes through
    /// the transformer and the merged set is the bare learned queries.
    pub fn forward_unpruned(&self, f_prime: &Tensor) -> Result<Triplane> {
        let initial = self.init_tokens(f_prime)?;
        let logits = self.predict_uncertainty(&initial)?;
        let (b, _, c) = initial.dims3()?;
        let queries = self.merge_queries.broadcast_as((b, self.cfg.num_merged, c))?.contiguous()?;
        let processed = self.transform(&initial, f_prime, &queries)?;
        let delta = self.delta_proj.forward(&processed)?;
        let w = sigmoid(&logits)?.unsqueeze(2)?;
        let full = (self.base_proj.forward(&initial)? + delta.broadcast_mul(&w)?)?;
        Triplane::from_tokens(&full, self.cfg.grid(), self.cfg.patch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, ParamStore};
    use candle_core::Device;
    use proptest::prelude::*;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            resolution: 8,
            patch_size: 2,
            width: 16,
            triplane_channels: 3,
            num_layers: 2,
            latent_layers: 1,
            num_heads: 2,
            num_merged: 2,
            ..Default::default()
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = crate::rng::stream(seed, &[]);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn prune_examples() {
        let (k, p) = prune_tokens(&[3.0, 1.0, 2.0, 0.0], 0.5).unwrap();
        assert_eq!((k, p), (vec![0, 2], vec![1, 3]));
        let (k, p) = prune_tokens(&[1.0; 5], 1.0).unwrap();
        assert_eq!(k, vec![0, 1, 2, 3, 4]);
        assert!(p.is_empty());
        let (k, _) = prune_tokens(&[1.0; 5], 0.4).unwrap();
        assert_eq!(k, vec![0, 1]);
        let logits: Vec<f64> = (0..768).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(prune_tokens(&logits, 0.25).unwrap().0.len(), 192);
        assert!(prune_tokens(&[0.0], 1.5).is_err());
    }

    proptest! {
        #[test]
        fn prune_partitions(logits in prop::collection::vec(-3i32..3, 1..200), ratio in 0.01f64..=1.0) {
            let l: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            let (k, p) = prune_tokens(&l, ratio).unwrap();
            prop_assert_eq!(k.len(), kept_count(l.len(), ratio));
            let mut all: Vec<usize> = k.iter().chain(&p).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
            let min_kept = k.iter().map(|&i| l[i]).fold(f64::INFINITY, f64::min);
            prop_assert!(p.iter().all(|&i| l[i] <= min_kept));
        }
    }

    #[test]
    fn token_cells_are_bijective() {
        let g = 5;
        let mut seen = vec![false; 3 * g * g];
        for t in 0..3 * g * g {
            let (p, r, c) = token_cell(t, g);
            assert_eq!(cell_token(p, r, c, g), t);
            assert!(!std::mem::replace(&mut seen[t], true));
        }
    }

    #[test]
    fn token_unpacking_layout() {
        let (g, f, ct) = (2, 3, 2);
        let t = 3 * g * g;
        let data: Vec<f64> = (0..t * f * f * ct).map(|i| i as f64).collect();
        let tokens = Tensor::from_vec(data, (1, t, f * f * ct), &Device::Cpu).unwrap();
        let planes = Triplane::from_tokens(&tokens, g, f).unwrap().planes;
        assert_eq!(planes.dims(), &[1, 3, 6, 6, 2]);
        let v: Vec<f64> = planes.flatten_all().unwrap().to_vec1().unwrap();
        for plane in 0..3 {
            for row in 0..6 {
                for col in 0..6 {
                    for ch in 0..ct {
                        let tok = cell_token(plane, row / f, col / f, g);
                        let expect = ((tok * f + row % f) * f + col % f) * ct + ch;
                        assert_eq!(v[((plane * 6 + row) * 6 + col) * ct + ch], expect as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn scatter_zeros_and_duplicates() {
        let rows = randn(&[1, 2, 3], 1);
        let s = scatter_tokens(&rows, &[vec![1, 3]], 5).unwrap();
        let v: Vec<Vec<f64>> = s.squeeze(0).unwrap().to_vec2().unwrap();
        for t in [0, 2, 4] {
            assert_eq!(v[t], vec![0.0; 3]);
        }
        assert_eq!(v[3], rows.squeeze(0).unwrap().to_vec2::<f64>().unwrap()[1]);
        assert!(scatter_tokens(&rows, &[vec![1, 1]], 5).is_err());
        assert!(scatter_tokens(&rows, &[vec![1, 9]], 5).is_err());
    }

    #[test]
    fn keep_all_matches_unpruned_path() {
        let s = ParamStore::new(DType::F64, 7);
        let cfg = DecoderConfig { keep_ratio: 1.0, ..tiny() };
        let dec = TriplaneDecoder::new(&s.root(), &cfg).unwrap();
        for seed in 0..3 {
            let f = randn(&[2, 5, 16], seed);
            let out = dec.forward(&f).unwrap();
            assert!(out.pruned.iter().all(|p| p.is_empty()));
            let reference = dec.forward_unpruned(&f).unwrap();
            assert!(max_diff(&out.triplane.planes, &reference.planes) <= 1e-6);
        }
    }

    #[test]
    fn assemble_degenerate_cases() {
        let s = ParamStore::new(DType::F64, 3);
        let dec = TriplaneDecoder::new(&s.root(), &tiny()).unwrap();
        let f = randn(&[1, 4, 16], 2);
        let init = dec.init_tokens(&f).unwrap();
        let logits = dec.predict_uncertainty(&init).unwrap();
        let empty = init.narrow(1, 0, 0).unwrap();
        let (base, out) = dec.assemble(&init, &empty, &[vec![]], &logits).unwrap();
        assert_eq!(max_diff(&base.planes, &out.planes), 0.0);

        s.insert("delta_proj.weight", &Tensor::zeros((16, 12), DType::F64, &Device::Cpu).unwrap()).unwrap();
        s.insert("delta_proj.bias", &Tensor::zeros(12, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let out = dec.forward(&f).unwrap();
        assert_eq!(max_diff(&out.base.planes, &out.triplane.planes), 0.0);
        assert_eq!(out.kept[0].len(), 12);
    }

    #[test]
    fn token_init_and_merge_are_set_functions() {
        let s = ParamStore::new(DType::F64, 5);
        let dec = TriplaneDecoder::new(&s.root(), &tiny()).unwrap();
        let f = randn(&[1, 4, 16], 9);
        let perm = Tensor::new(&[2u32, 0, 3, 1], &Device::Cpu).unwrap();
        let fp = f.index_select(&perm, 1).unwrap();
        assert!(max_diff(&dec.init_tokens(&f).unwrap(), &dec.init_tokens(&fp).unwrap()) < 1e-5);
        assert!(max_diff(&dec.merge_pruned(&f).unwrap(), &dec.merge_pruned(&fp).unwrap()) < 1e-5);
        let none = f.narrow(1, 0, 0).unwrap();
        let q = dec.merge_pruned(&none).unwrap();
        assert_eq!(max_diff(&q, &s.var("merge_queries").unwrap().as_tensor().clone()), 0.0);

        let single = f.narrow(1, 0, 1).unwrap();
        assert_eq!(dec.init_tokens(&single).unwrap().dims(), &[1, 48, 16]);
        let kept = randn(&[1, 7, 16], 3);
        assert_eq!(dec.transform(&kept, &f, &q).unwrap().dims(), &[1, 7, 16]);
    }

    #[test]
    fn transform_is_equivariant_in_kept_tokens() {
        let s = ParamStore::new(DType::F64, 5);
        let dec = TriplaneDecoder::new(&s.root(), &tiny()).unwrap();
        let f = randn(&[1, 4, 16], 1);
        let m = randn(&[1, 2, 16], 2);
        let kept = randn(&[1, 3, 16], 3);
        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let a = dec.transform(&kept, &f, &m).unwrap().index_select(&perm, 1).unwrap();
        let b = dec.transform(&kept.index_select(&perm, 1).unwrap(), &f, &m).unwrap();
        assert!(max_diff(&a, &b) < 1e-10);
    }

    #[test]
    fn uncertainty_head_bias_and_identity() {
        let s = ParamStore::new(DType::F64, 5);
        let dec = TriplaneDecoder::new(&s.root(), &tiny()).unwrap();
        let same = randn(&[1, 1, 16], 4).broadcast_as((1, 6, 16)).unwrap().contiguous().unwrap();
        let l: Vec<f64> = dec.predict_uncertainty(&same).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(l.iter().all(|v| *v == l[0]));
        let big = (randn(&[1, 6, 16], 5).tanh().unwrap() * 10.0).unwrap();
        let l: Vec<f64> = dec.predict_uncertainty(&big).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
        s.insert("uncertainty.out.weight", &Tensor::zeros((8, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        s.insert("uncertainty.out.bias", &Tensor::new(&[0.7f64], &Device::Cpu).unwrap()).unwrap();
        let l: Vec<f64> = dec.predict_uncertainty(&big).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(l.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn latent_decoder_shapes() {
        let s = ParamStore::new(DType::F32, 0);
        let ld = LatentDecoder::new(&s.root(), 4, &tiny()).unwrap();
        let z = Tensor::zeros((2, 5, 4), DType::F32, &Device::Cpu).unwrap();
        let a = ld.forward(&z).unwrap();
        assert_eq!(a.dims(), &[2, 5, 16]);
        assert_eq!(max_diff(&a, &ld.forward(&z).unwrap()), 0.0);
    }

    #[test]
    fn config_checks() {
        assert!(DecoderConfig { resolution: 31, ..tiny() }.validate().is_err());
        assert!(DecoderConfig { keep_ratio: 0.0, ..tiny() }.validate().is_err());
        assert_eq!(DecoderConfig { resolution: 128, patch_size: 8, ..tiny() }.num_tokens(), 768);
    }
}
