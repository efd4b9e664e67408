use serde::{Deserialize, Serialize};

use super::OccupancyField;
use crate::error::{invalid, Result};
use crate::geometry::Point;

/// Coordinate of lattice index `i` on an `r`-point lattice spanning [-1, 1].
pub fn lattice_coordinate(i: usize, r: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (r - 1) as f64
}

/// Occupancy probabilities on an `r³` vertex lattice, flattened as
/// `(ix * r + iy) * r + iz`. Unevaluated cells hold 0 and are unmasked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub values: Vec<f32>,
    pub evaluated: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiresStats {
    pub coarse_evaluations: usize,
    pub fine_evaluations: usize,
}

impl OccupancyGrid {
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    pub fn point(&self, i: usize) -> Point {
        let r = self.resolution;
        [
            lattice_coordinate(i / (r * r), r),
            lattice_coordinate((i / r) % r, r),
            lattice_coordinate(i % r, r),
        ]
    }

    pub fn evaluated_count(&self) -> usize {
        self.evaluated.iter().filter(|&&e| e).count()
    }

    /// Grid from a closure over lattice points, evaluating every cell.
    pub fn from_fn(r: usize, mut f: impl FnMut(Point) -> f32) -> Result<Self> {
        if r < 2 {
            return Err(invalid!("grid resolution must be at least 2, got {r}"));
        }
        let mut g = OccupancyGrid { resolution: r, values: vec![0.0; r * r * r], evaluated: vec![true; r * r * r] };
        for i in 0..g.values.len() {
            g.values[i] = f(g.point(i));
        }
        Ok(g)
    }

    /// Evaluates every lattice point in chunks of `chunk` queries.
    pub fn dense(field: &OccupancyField, r: usize, chunk: usize) -> Result<Self> {
        if r < 2 {
            return Err(invalid!("grid resolution must be at least 2, got {r}"));
        }
        if chunk == 0 {
            return Err(invalid!("chunk size must be positive"));
        }
        let n = r * r * r;
        let mut g = OccupancyGrid { resolution: r, values: vec![0.0; n], evaluated: vec![true; n] };
        let mut start = 0;
        let mut buf = Vec::with_capacity(chunk);
        while start < n {
            let end = (start + chunk).min(n);
            buf.clear();
            buf.extend((start..end).map(|i| g.point(i)));
            for (v, l) in g.values[start..end].iter_mut().zip(field.logits(&buf)) {
                *v = super::logistic(l);
            }
            start = end;
        }
        Ok(g)
    }

    /// Coarse pass on a `coarse_r` lattice, then a fine pass restricted to
    /// fine points whose nearest coarse point lies within `dilation` coarse
    /// cells (Chebyshev) of an occupied coarse point.
    pub fn multires(
        field: &OccupancyField,
        coarse_r: usize,
        fine_r: usize,
        dilation: usize,
        threshold: f64,
    ) -> Result<(Self, MultiresStats)> {
        if coarse_r < 2 || fine_r < 2 || fine_r % coarse_r != 0 {
            return Err(invalid!("fine resolution {fine_r} must be a multiple of coarse resolution {coarse_r}"));
        }
        let coarse = Self::dense(field, coarse_r, 1 << 16)?;
        let cr = coarse_r as isize;
        let mut active = vec![false; coarse.values.len()];
        for (i, &v) in coarse.values.iter().enumerate() {
            if (v as f64) < threshold {
                continue;
            }
            let (x, y, z) = ((i / (coarse_r * coarse_r)) as isize, ((i / coarse_r) % coarse_r) as isize, (i % coarse_r) as isize);
            let d = dilation as isize;
            for dx in -d..=d {
                for dy in -d..=d {
                    for dz in -d..=d {
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if (0..cr).contains(&a) && (0..cr).contains(&b) && (0..cr).contains(&c) {
                            active[((a * cr + b) * cr + c) as usize] = true;
                        }
                    }
                }
            }
        }
        let near = |j: usize| -> usize { ((j * (coarse_r - 1)) as f64 / (fine_r - 1) as f64).round() as usize };
        let n = fine_r * fine_r * fine_r;
        let mut g = OccupancyGrid { resolution: fine_r, values: vec![0.0; n], evaluated: vec![false; n] };
        let mut fine = 0;
        for i in 0..n {
            let (x, y, z) = (i / (fine_r * fine_r), (i / fine_r) % fine_r, i % fine_r);
            if active[(near(x) * coarse_r + near(y)) * coarse_r + near(z)] {
                g.values[i] = field.probability(g.point(i));
                g.evaluated[i] = true;
                fine += 1;
            }
        }
        Ok((g, MultiresStats { coarse_evaluations: coarse.values.len(), fine_evaluations: fine }))
    }
}
