//! Occupancy decoding from triplanes.
//!
//! Plane coordinates use the align-corners convention: `u = -1` lands on the
//! centre of texel 0 and `u = +1` on the centre of texel `R-1`. Columns follow
//! the first plane coordinate and rows the second; the planes read `(x, y)`,
//! `(y, z)` and `(x, z)`.

mod grid;
mod isosurface;

pub use grid::{lattice_coordinate, MultiresStats, OccupancyGrid};
pub use isosurface::extract_mesh;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::decoder::Triplane;
use crate::error::{invalid, Error, Result};
use crate::geometry::Point;
use crate::nn::{sigmoid, Linear, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { hidden: 64, hidden_layers: 2 }
    }
}

/// Plane coordinates of `q` in plane order xy, yz, xz.
pub fn plane_coords(q: Point) -> [(f64, f64); 3] {
    [(q[0], q[1]), (q[1], q[2]), (q[0], q[2])]
}

/// Bilinear cell for `(u, v)` on a `res × res` grid: texel indices
/// `row * res + col` ordered (r0,c0), (r0,c1), (r1,c0), (r1,c1), plus the
/// column and row fractions. Out-of-range coordinates are clamped.
pub fn bilinear_cell(u: f64, v: f64, res: usize) -> ([usize; 4], f64, f64) {
    let axis = |t: f64| -> (usize, usize, f64) {
        if res == 1 {
            return (0, 0, 0.0);
        }
        let p = (t.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1) as f64;
        let i0 = (p.floor() as usize).min(res - 2);
        (i0, i0 + 1, p - i0 as f64)
    };
    let (c0, c1, fc) = axis(u);
    let (r0, r1, fr) = axis(v);
    ([r0 * res + c0, r0 * res + c1, r1 * res + c0, r1 * res + c1], fc, fr)
}

/// Nested linear interpolation of four corner values; exact when all four
/// are equal.
pub fn bilerp(t: [f64; 4], fc: f64, fr: f64) -> f64 {
    let top = t[0] + fc * (t[1] - t[0]);
    let bottom = t[2] + fc * (t[3] - t[2]);
    top + fr * (bottom - top)
}

/// Bilinear samples of every plane at every query: `(batch, 3, res, res, ch)`
/// planes and equal-length query lists give `(batch, Q, 3, ch)`.
pub fn sample_planes(planes: &Tensor, queries: &[Vec<Point>]) -> Result<Tensor> {
    let (b, three, res, res2, ch) = planes.dims5()?;
    if three != 3 || res != res2 {
        return Err(invalid!("planes must be (batch, 3, R, R, channels), got {:?}", planes.dims()));
    }
    if queries.len() != b {
        return Err(invalid!("{} query lists for a batch of {b}", queries.len()));
    }
    let q = queries.first().map_or(0, |v| v.len());
    if queries.iter().any(|v| v.len() != q) {
        return Err(invalid!("query lists must have equal length"));
    }
    if q == 0 {
        return Ok(Tensor::zeros((b, 0, 3, ch), planes.dtype(), planes.device())?);
    }
    let mut idx = Vec::with_capacity(b * q * 12);
    let mut fcs = Vec::with_capacity(b * q * 3);
    let mut frs = Vec::with_capacity(b * q * 3);
    for (bi, list) in queries.iter().enumerate() {
        for &p in list {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(invalid!("non-finite query {p:?}"));
            }
            for (pl, (u, v)) in plane_coords(p).into_iter().enumerate() {
                let offset = (bi * 3 + pl) * res * res;
                let (taps, fc, fr) = bilinear_cell(u, v, res);
                idx.extend(taps.map(|i| (offset + i) as u32));
                fcs.push(fc);
                frs.push(fr);
            }
        }
    }
    let dev = planes.device();
    let dt = planes.dtype();
    let flat = planes.reshape((b * 3 * res * res, ch))?;
    let ids = Tensor::from_vec(idx, b * q * 12, dev)?;
    let taps = flat.index_select(&ids, 0)?.reshape((b * q * 3, 4, ch))?;
    let fc = Tensor::from_vec(fcs, (b * q * 3, 1), dev)?.to_dtype(dt)?;
    let fr = Tensor::from_vec(frs, (b * q * 3, 1), dev)?.to_dtype(dt)?;
    let t = |i: usize| taps.narrow(1, i, 1).and_then(|x| x.squeeze(1));
    let (t0, t1, t2, t3) = (t(0)?, t(1)?, t(2)?, t(3)?);
    let top = (&t0 + (&t1 - &t0)?.broadcast_mul(&fc)?)?;
    let bottom = (&t2 + (&t3 - &t2)?.broadcast_mul(&fc)?)?;
    let out = (&top + (bottom - &top)?.broadcast_mul(&fr)?)?;
    Ok(out.reshape((b, q, 3, ch))?)
}

/// Summed plane features per query, `(batch, Q, ch)`.
pub fn triplane_features(triplane: &Triplane, queries: &[Vec<Point>]) -> Result<Tensor> {
    Ok(sample_planes(&triplane.planes, queries)?.sum(2)?)
}

/// `u(q)`: product over the three planes of the bilinearly sampled
/// sigmoid-activated uncertainty logits. `logit_planes` is
/// `(batch, 3, g, g)`; the result is `(batch, Q)`.
pub fn uncertainty_at_query(logit_planes: &Tensor, queries: &[Vec<Point>]) -> Result<Tensor> {
    let s = sigmoid(logit_planes)?.unsqueeze(D::Minus1)?;
    let per_plane = sample_planes(&s, queries)?.squeeze(D::Minus1)?;
    let p0 = per_plane.narrow(2, 0, 1)?;
    let p1 = per_plane.narrow(2, 1, 1)?;
    let p2 = per_plane.narrow(2, 2, 1)?;
    Ok((p0 * p1)?.mul(&p2)?.squeeze(2)?)
}

/// Host-side `u(q)` for one sample; `logits` holds three row-major `g × g`
/// planes back to back.
pub fn uncertainty_at_point(logits: &[f64], grid: usize, q: Point) -> Result<f64> {
    if logits.len() != 3 * grid * grid {
        return Err(invalid!("expected {} logits, got {}", 3 * grid * grid, logits.len()));
    }
    let mut u = 1.0;
    for (pl, (a, b)) in plane_coords(q).into_iter().enumerate() {
        let plane = &logits[pl * grid * grid..(pl + 1) * grid * grid];
        let (taps, fc, fr) = bilinear_cell(a, b, grid);
        u *= bilerp(taps.map(|i| 1.0 / (1.0 + (-plane[i]).exp())), fc, fr);
    }
    Ok(u)
}

/// Shallow MLP from triplane features to one occupancy logit.
#[derive(Clone, Debug)]
pub struct FieldMlp {
    layers: Vec<Linear>,
}

impl FieldMlp {
    pub fn new(p: &Params, in_dim: usize, cfg: &FieldConfig) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("fields.hidden must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut d = in_dim;
        for i in 0..cfg.hidden_layers {
            layers.push(Linear::new(&p.pp(&format!("layers.{i}")), d, cfg.hidden)?);
            d = cfg.hidden;
        }
        layers.push(Linear::new(&p.pp("out"), d, 1)?);
        Ok(FieldMlp { layers })
    }

    /// `(..., ch)` features to `(...)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i < last {
                h = crate::nn::gelu(&h)?;
            }
        }
        Ok(h.squeeze(D::Minus1)?)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// Occupancy logits `(batch, Q)` for queries against a batch of triplanes.
pub fn query_occupancy(mlp: &FieldMlp, triplane: &Triplane, queries: &[Vec<Point>]) -> Result<Tensor> {
    mlp.forward(&triplane_features(triplane, queries)?)
}

/// One decoded shape: a single triplane plus the MLP, evaluated on the host
/// for grid extraction. Host evaluation visits each query independently in a
/// fixed order, so results do not depend on chunking.
#[derive(Clone, Debug)]
pub struct OccupancyField {
    res: usize,
    ch: usize,
    planes: Vec<f32>,
    layers: Vec<(Vec<f32>, Vec<f32>, usize, usize)>,
}

impl OccupancyField {
    pub fn new(mlp: &FieldMlp, triplane: &Triplane) -> Result<Self> {
        if triplane.batch() != 1 {
            return Err(invalid!("OccupancyField takes a single triplane, got batch {}", triplane.batch()));
        }
        let to_vec = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?) };
        let layers = mlp
            .layers
            .iter()
            .map(|l| {
                let (i, o) = l.weight().dims2()?;
                let bias = match l.bias() {
                    Some(b) => to_vec(b)?,
                    None => vec![0.0; o],
                };
                Ok((to_vec(l.weight())?, bias, i, o))
            })
            .collect::<Result<Vec<_>>>()?;
        if layers[0].2 != triplane.channels() {
            return Err(Error::Config(format!(
                "MLP expects {} channels but the triplane has {}",
                layers[0].2,
                triplane.channels()
            )));
        }
        Ok(OccupancyField {
            res: triplane.resolution(),
            ch: triplane.channels(),
            planes: to_vec(&triplane.planes)?,
            layers,
        })
    }

    /// Occupancy logit at one point.
    pub fn logit(&self, q: Point) -> f32 {
        let mut feat = vec![0f32; self.ch];
        let rr = self.res * self.res;
        for (pl, (u, v)) in plane_coords(q).into_iter().enumerate() {
            let (taps, fc, fr) = bilinear_cell(u, v, self.res);
            let (fc, fr) = (fc as f32, fr as f32);
            let row = |k: usize| &self.planes[(pl * rr + taps[k]) * self.ch..(pl * rr + taps[k] + 1) * self.ch];
            let (t0, t1, t2, t3) = (row(0), row(1), row(2), row(3));
            for c in 0..self.ch {
                let top = t0[c] + fc * (t1[c] - t0[c]);
                let bottom = t2[c] + fc * (t3[c] - t2[c]);
                feat[c] += top + fr * (bottom - top);
            }
        }
        let last = self.layers.len() - 1;
        for (li, (w, b, d_in, d_out)) in self.layers.iter().enumerate() {
            let mut out = b.clone();
            for i in 0..*d_in {
                let x = feat[i];
                let row = &w[i * d_out..(i + 1) * d_out];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += x * wv;
                }
            }
            if li < last {
                for o in out.iter_mut() {
                    *o = crate::nn::gelu_f32(*o);
                }
            }
            feat = out;
        }
        feat[0]
    }

    pub fn logits(&self, queries: &[Point]) -> Vec<f32> {
        queries.iter().map(|&q| self.logit(q)).collect()
    }

    pub fn probability(&self, q: Point) -> f32 {
        logistic(self.logit(q))
    }

    pub fn occupancy(&self, queries: &[Point], threshold: f64) -> Vec<bool> {
        queries.iter().map(|&q| self.probability(q) as f64 >= threshold).collect()
    }
}

pub fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
