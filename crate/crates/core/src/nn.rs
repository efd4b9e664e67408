//! Parameter store and transformer building blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Each parameter
//! is initialised from its own seeded stream, so the values do not depend on
//! construction order. Modules hold cheap tensor handles into the store;
//! parameters under a frozen prefix are handed out detached, which keeps them
//! out of the autodiff graph entirely.

use std::collections::BTreeMap;
use std::sync::RwLock;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    Uniform(f64),
    /// Glorot uniform for a `(fan_in, fan_out)` matrix.
    Xavier,
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    vars: RwLock<BTreeMap<String, Var>>,
    frozen: RwLock<Vec<String>>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            seed,
            vars: RwLock::new(BTreeMap::new()),
            frozen: RwLock::new(Vec::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Params<'_> {
        self.root().pp(prefix)
    }

    /// Marks every parameter under `prefix` as frozen for modules built from
    /// now on.
    pub fn freeze(&self, prefix: &str) {
        self.frozen.write().expect("lock").push(prefix.to_string());
    }

    pub fn unfreeze_all(&self) {
        self.frozen.write().expect("lock").clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen
            .read()
            .expect("lock")
            .iter()
            .any(|p| name == p || name.starts_with(&format!("{p}.")))
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.read().expect("lock").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.read().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.read().expect("lock").get(name).cloned()
    }

    /// Parameters that are not frozen, sorted by name.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.vars
            .read()
            .expect("lock")
            .iter()
            .filter(|(n, _)| !self.is_frozen(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn frozen_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .read()
            .expect("lock")
            .iter()
            .filter(|(n, _)| self.is_frozen(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.vars
            .read()
            .expect("lock")
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Inserts or overwrites a parameter (checkpoint loading).
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        let mut vars = self.vars.write().expect("lock");
        match vars.get(name) {
            Some(v) => {
                if v.dims() != value.dims() {
                    return Err(Error::Config(format!(
                        "parameter {name}: stored shape {:?} does not match {:?}",
                        value.dims(),
                        v.dims()
                    )));
                }
                v.set(&value)?;
            }
            None => {
                vars.insert(name.to_string(), Var::from_tensor(&value)?);
            }
        }
        Ok(())
    }

    /// Flattened values of a parameter, widened to f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .var(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Deep copies of every parameter, for before/after comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.all()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.vars
            .read()
            .expect("lock")
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let existing = self.var(name);
        let var = match existing {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, model expects {shape:?}",
                        v.dims()
                    )));
                }
                v
            }
            None => {
                let t = self.initial_value(name, shape, init)?;
                let v = Var::from_tensor(&t)?;
                self.vars
                    .write()
                    .expect("lock")
                    .insert(name.to_string(), v.clone());
                v
            }
        };
        if self.is_frozen(name) {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    fn initial_value(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(self.seed, &[rng::name_tag(name)]);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut r)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| r.gen_range(-b..=b)).collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| r.gen_range(-b..=b)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }
}

/// Scoped view of a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: &str) -> Params<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.fetch(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

/// Affine map; the weight is stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: p.get("weight", &[d_in, d_out], Init::Xavier)?,
            bias: Some(p.get("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn with_init(p: &Params, d_in: usize, d_out: usize, weight: Init, bias: Init) -> Result<Self> {
        Ok(Linear {
            weight: p.get("weight", &[d_in, d_out], weight)?,
            bias: Some(p.get("bias", &[d_out], bias)?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Internal("scalar input to Linear".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Normalizes the last dimension to zero mean and unit variance.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: p.get("weight", &[dim], Init::Ones)?,
            bias: p.get("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x, LAYER_NORM_EPS)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // The shift cancels in the gradient, so it need not be tracked.
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Multi-head scaled dot-product attention over `(batch, seq, width)` inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &Params, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(&p.pp("q"), width, width)?,
            k: Linear::new(&p.pp("k"), width, width)?,
            v: Linear::new(&p.pp("v"), width, width)?,
            out: Linear::new(&p.pp("out"), width, width)?,
            heads,
        })
    }

    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, sq, c) = queries.dims3()?;
        let (bk, sk, ck) = context.dims3()?;
        if b != bk || c != ck {
            return Err(Error::InvalidArgument(format!(
                "attention shape mismatch: queries {:?}, context {:?}",
                queries.dims(),
                context.dims()
            )));
        }
        let d = c / self.heads;
        let split = |t: Tensor, s: usize| -> Result<Tensor> {
            Ok(t.reshape((b, s, self.heads, d))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(queries)?, sq)?;
        let k = split(self.k.forward(context)?, sk)?;
        let v = split(self.v.forward(context)?, sk)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, sq, c))?;
        self.out.forward(&o)
    }
}

const GELU_CUBIC: f64 = 0.044715;
/// `2 * sqrt(2 / pi)`.
const GELU_SCALE: f64 = 1.595_769_121_605_730_7;

macro_rules! gelu_scalar {
    ($name:ident, $grad:ident, $t:ty) => {
        /// Tanh-form GELU written as `x * sigmoid(z)`.
        #[inline]
        pub fn $name(x: $t) -> $t {
            let z = GELU_SCALE as $t * (x + GELU_CUBIC as $t * x * x * x);
            x / (1.0 + (-z).exp())
        }

        #[inline]
        pub fn $grad(x: $t) -> $t {
            let z = GELU_SCALE as $t * (x + GELU_CUBIC as $t * x * x * x);
            let s = 1.0 / (1.0 + (-z).exp());
            s + x * s * (1.0 - s) * GELU_SCALE as $t * (1.0 + 3.0 * GELU_CUBIC as $t * x * x)
        }
    };
}

gelu_scalar!(gelu_f32, gelu_grad_f32, f32);
gelu_scalar!(gelu_f64, gelu_grad_f64, f64);

struct GeluOp;
struct GeluGradOp;

fn map_elementwise(
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("gelu expects a contiguous tensor".into()))?;
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f64_fn(x)).collect()),
        _ => return Err(candle_core::Error::Msg("gelu supports f32 and f64 only".into())),
    };
    Ok((out, layout.shape().clone()))
}

impl CustomOp1 for GeluOp {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, gelu_f32, gelu_f64)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = arg.contiguous()?.apply_op1_no_bwd(&GeluGradOp)?;
        Ok(Some(grad_res.mul(&d)?))
    }
}

impl CustomOp1 for GeluGradOp {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_elementwise(storage, layout, gelu_grad_f32, gelu_grad_f64)
    }
}

/// Tanh-form GELU as one fused elementwise op with an analytic gradient.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GeluOp)?)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &Params, width: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&p.pp("fc1"), width, hidden)?,
            fc2: Linear::new(&p.pp("fc2"), hidden, width)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new(p: &Params, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(SelfAttentionBlock {
            norm1: LayerNorm::new(&p.pp("norm1"), width)?,
            attn: Attention::new(&p.pp("attn"), width, heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), width)?,
            mlp: Mlp::new(&p.pp("mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Pre-norm cross-attention block: `x` attends to `context`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(p: &Params, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(CrossAttentionBlock {
            norm_q: LayerNorm::new(&p.pp("norm_q"), width)?,
            norm_kv: LayerNorm::new(&p.pp("norm_kv"), width)?,
            attn: Attention::new(&p.pp("attn"), width, heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), width)?,
            mlp: Mlp::new(&p.pp("mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.norm_q.forward(x)?;
        let kv = self.norm_kv.forward(context)?;
        let x = (x + self.attn.forward(&q, &kv)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Gathers rows `idx[b][i]` from a `(batch, n, width)` tensor.
pub fn gather_rows(x: &Tensor, idx: &[Vec<usize>]) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if idx.len() != b {
        return Err(Error::InvalidArgument(format!(
            "gather_rows: {} index lists for batch {b}",
            idx.len()
        )));
    }
    let k = idx.first().map_or(0, |v| v.len());
    let mut flat = Vec::with_capacity(b * k);
    for (bi, rows) in idx.iter().enumerate() {
        if rows.len() != k {
            return Err(Error::InvalidArgument("gather_rows: ragged index lists".into()));
        }
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!("gather_rows: row {r} out of range {n}")));
            }
            flat.push((bi * n + r) as u32);
        }
    }
    let ids = Tensor::from_vec(flat, b * k, x.device())?;
    Ok(x.reshape((b * n, c))?.index_select(&ids, 0)?.reshape((b, k, c))?)
}

/// `(rows, 3)` tensor of coordinates.
pub fn points_tensor(points: &[[f64; 3]], dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (points.len(), 3), device)?.to_dtype(dtype)?)
}

/// Scalar value of a single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
