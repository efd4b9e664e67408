//! Procedural solids, point and query sampling, farthest-point sampling and
//! triangle meshes.

mod dataset;
mod fps;
mod mesh;
mod shape;

pub use dataset::{DatasetManifest, ManifestEntry, MANIFEST_VERSION};
pub use fps::{farthest_point_sample, farthest_point_sample_from};
pub use mesh::{Mesh, OPEN_MESH_TOLERANCE};
pub use shape::{Axis, ProceduralShape, BOUNDARY_TOLERANCE, CUBE_MARGIN};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

pub type Point = [f64; 3];

/// Default standard deviation of the near-surface query perturbation.
pub const DEFAULT_NEAR_SIGMA: f64 = 0.05;

/// Finite, non-empty set of surface samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid!("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid!("point cloud contains NaN or infinite coordinates"));
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Returns a copy with the rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        PointCloud {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, t: Point) -> Self {
        PointCloud {
            points: self.points.iter().map(|p| add(*p, t)).collect(),
        }
    }
}

/// Training or evaluation queries with ground-truth occupancy.
///
/// Volume samples come first, followed by the near-surface samples; `near`
/// marks the latter.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub points: Vec<Point>,
    pub labels: Vec<bool>,
    pub near: Vec<bool>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let near = self.near.iter().filter(|n| **n).count();
        (self.points.len() - near, near)
    }
}

/// Draws `n_vol` uniform queries in the cube and `n_near` surface samples
/// perturbed by isotropic Gaussian noise, labelled by the analytic oracle.
pub fn sample_queries(
    shape: &ProceduralShape,
    n_vol: usize,
    n_near: usize,
    near_sigma: f64,
    seed: u64,
) -> Result<QueryBatch> {
    if !(near_sigma > 0.0) {
        return Err(invalid!("near_sigma must be positive, got {near_sigma}"));
    }
    let mut points = Vec::with_capacity(n_vol + n_near);
    let mut vol_rng = rng::stream(seed, &[rng::name_tag("volume-queries")]);
    for _ in 0..n_vol {
        points.push([0; 3].map(|_| vol_rng.gen_range(-1.0..=1.0)));
    }
    if n_near > 0 {
        let surface = shape.sample_surface(n_near, rng::derive_seed(seed, &[rng::name_tag("near-surface")]))?;
        let noise = Normal::new(0.0, near_sigma).map_err(|e| invalid!("{e}"))?;
        let mut noise_rng = rng::stream(seed, &[rng::name_tag("near-noise")]);
        for p in surface.points() {
            let q = [0, 1, 2].map(|i| (p[i] + noise.sample(&mut noise_rng)).clamp(-1.0, 1.0));
            points.push(q);
        }
    }
    let labels = shape.occupancy(&points);
    let mut near = vec![false; n_vol];
    near.resize(n_vol + n_near, true);
    Ok(QueryBatch {
        points,
        labels,
        near,
    })
}

/// Uniform samples of the cube `[-1, 1]^3`.
pub fn uniform_cube_points(n: usize, seed: u64) -> Vec<Point> {
    let mut r = rng::stream(seed, &[rng::name_tag("uniform-cube")]);
    (0..n)
        .map(|_| [0; 3].map(|_| r.gen_range(-1.0..=1.0)))
        .collect()
}

pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn length(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Point) -> Point {
    scale(a, 1.0 / length(a))
}

pub fn squared_distance(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}
