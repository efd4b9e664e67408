use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{add, cross, dot, length, normalize, scale, sub, Point, PointCloud};
use crate::error::{invalid, Result};
use crate::rng;

/// Points whose signed distance is at most this value count as inside.
///
/// Surface samples carry rounding error of a few ulps; without the slack the
/// oracle would label some of them outside.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

/// Every generated shape keeps this much clearance from the cube faces.
pub const CUBE_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Watertight analytic solid inside `[-1, 1]^3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProceduralShape {
    Sphere {
        center: Point,
        radius: f64,
    },
    Box {
        center: Point,
        half_extents: Point,
    },
    /// Segment `a`-`b` swept by a ball of `radius`.
    Capsule {
        a: Point,
        b: Point,
        radius: f64,
    },
    Torus {
        center: Point,
        axis: Axis,
        major_radius: f64,
        minor_radius: f64,
    },
    Union {
        parts: Vec<ProceduralShape>,
    },
}

impl ProceduralShape {
    pub fn sphere(radius: f64) -> Self {
        ProceduralShape::Sphere {
            center: [0.0; 3],
            radius,
        }
    }

    pub fn cube(half_extent: f64) -> Self {
        ProceduralShape::Box {
            center: [0.0; 3],
            half_extents: [half_extent; 3],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ProceduralShape::Sphere { .. } => "sphere",
            ProceduralShape::Box { .. } => "box",
            ProceduralShape::Capsule { .. } => "capsule",
            ProceduralShape::Torus { .. } => "torus",
            ProceduralShape::Union { .. } => "union",
        }
    }

    /// Checks parameter sanity and that the solid sits strictly inside the
    /// unit cube.
    pub fn validate(&self) -> Result<()> {
        match self {
            ProceduralShape::Sphere { radius, .. } if *radius <= 0.0 => {
                return Err(invalid!("sphere radius must be positive"))
            }
            ProceduralShape::Box { half_extents, .. } if half_extents.iter().any(|h| *h <= 0.0) => {
                return Err(invalid!("box half extents must be positive"))
            }
            ProceduralShape::Capsule { radius, .. } if *radius <= 0.0 => {
                return Err(invalid!("capsule radius must be positive"))
            }
            ProceduralShape::Torus {
                major_radius,
                minor_radius,
                ..
            } if *minor_radius <= 0.0 || *major_radius <= *minor_radius => {
                return Err(invalid!("torus needs 0 < minor_radius < major_radius"))
            }
            ProceduralShape::Union { parts } => {
                if parts.is_empty() {
                    return Err(invalid!("union needs at least one part"));
                }
                for p in parts {
                    if matches!(p, ProceduralShape::Union { .. }) {
                        return Err(invalid!("nested unions are not supported"));
                    }
                    p.validate()?;
                }
            }
            _ => {}
        }
        let (lo, hi) = self.bounds();
        if lo.iter().chain(hi.iter()).any(|c| c.abs() >= 1.0 || !c.is_finite()) {
            return Err(invalid!(
                "{} extends outside the open unit cube: {lo:?}..{hi:?}",
                self.kind_name()
            ));
        }
        Ok(())
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Point, Point) {
        match self {
            ProceduralShape::Sphere { center, radius } => (
                center.map(|c| c - radius),
                center.map(|c| c + radius),
            ),
            ProceduralShape::Box {
                center,
                half_extents,
            } => (
                [0, 1, 2].map(|i| center[i] - half_extents[i]),
                [0, 1, 2].map(|i| center[i] + half_extents[i]),
            ),
            ProceduralShape::Capsule { a, b, radius } => (
                [0, 1, 2].map(|i| a[i].min(b[i]) - radius),
                [0, 1, 2].map(|i| a[i].max(b[i]) + radius),
            ),
            ProceduralShape::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => {
                let mut ext = [major_radius + minor_radius; 3];
                ext[axis.index()] = *minor_radius;
                (
                    [0, 1, 2].map(|i| center[i] - ext[i]),
                    [0, 1, 2].map(|i| center[i] + ext[i]),
                )
            }
            ProceduralShape::Union { parts } => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for p in parts {
                    let (l, h) = p.bounds();
                    for i in 0..3 {
                        lo[i] = lo[i].min(l[i]);
                        hi[i] = hi[i].max(h[i]);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Signed distance; negative inside. Exact for the primitives, and exact
    /// outside (a bound inside) for unions.
    pub fn sdf(&self, p: Point) -> f64 {
        match self {
            ProceduralShape::Sphere { center, radius } => length(sub(p, *center)) - radius,
            ProceduralShape::Box {
                center,
                half_extents,
            } => {
                let q: Point = [0, 1, 2].map(|i| (p[i] - center[i]).abs() - half_extents[i]);
                let outside = length(q.map(|c| c.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            ProceduralShape::Capsule { a, b, radius } => {
                let ab = sub(*b, *a);
                let ap = sub(p, *a);
                let denom = dot(ab, ab);
                let t = if denom > 0.0 {
                    (dot(ap, ab) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                length(sub(ap, scale(ab, t))) - radius
            }
            ProceduralShape::Torus {
                center,
                axis,
                major_radius,
                minor_radius,
            } => {
                let d = sub(p, *center);
                let (u, v, w) = torus_frame(d, *axis);
                let ring = (u * u + v * v).sqrt() - major_radius;
                (ring * ring + w * w).sqrt() - minor_radius
            }
            ProceduralShape::Union { parts } => parts
                .iter()
                .map(|s| s.sdf(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Boundary-inclusive inside test.
    pub fn contains(&self, p: Point) -> bool {
        self.sdf(p) <= BOUNDARY_TOLERANCE
    }

    /// Analytic occupancy labels for a batch of queries.
    pub fn occupancy(&self, queries: &[Point]) -> Vec<bool> {
        queries.iter().map(|q| self.contains(*q)).collect()
    }

    /// Surface area of the primitive. For unions this is the sum over parts
    /// (an upper bound), used only as a sampling weight.
    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            ProceduralShape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            ProceduralShape::Box { half_extents: h, .. } => {
                8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
            }
            ProceduralShape::Capsule { a, b, radius } => {
                2.0 * PI * radius * length(sub(*b, *a)) + 4.0 * PI * radius * radius
            }
            ProceduralShape::Torus {
                major_radius,
                minor_radius,
                ..
            } => 4.0 * PI * PI * major_radius * minor_radius,
            ProceduralShape::Union { parts } => parts.iter().map(|p| p.surface_area()).sum(),
        }
    }

    /// Draws `n` points uniformly (by area) from the surface.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(invalid!("sample_surface needs n >= 1"));
        }
        let mut rng = rng::stream(seed, &[rng::name_tag("surface")]);
        let points = (0..n).map(|_| self.surface_point(&mut rng)).collect();
        PointCloud::new(points)
    }

    fn surface_point<R: Rng>(&self, rng: &mut R) -> Point {
        use std::f64::consts::PI;
        match self {
            ProceduralShape::Sphere { center, radius } => add(*center, scale(unit_vector(rng), *radius)),
            ProceduralShape::Box {
                center,
                half_extents: h,
            } => {
                // Pairs of faces normal to x, y and z.
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let axis = pick_weighted(rng, &areas);
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = if i == axis {
                        if rng.gen::<bool>() {
                            h[i]
                        } else {
                            -h[i]
                        }
                    } else {
                        rng.gen_range(-h[i]..=h[i])
                    };
                }
                add(*center, p)
            }
            ProceduralShape::Capsule { a, b, radius } => {
                let ab = sub(*b, *a);
                let len = length(ab);
                let lateral = 2.0 * PI * radius * len;
                let caps = 4.0 * PI * radius * radius;
                if len > 0.0 && rng.gen::<f64>() * (lateral + caps) < lateral {
                    let axis = scale(ab, 1.0 / len);
                    let (e1, e2) = orthonormal_pair(axis);
                    let t: f64 = rng.gen();
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    let offset = add(scale(e1, radius * phi.cos()), scale(e2, radius * phi.sin()));
                    add(add(*a, scale(ab, t)), offset)
                } else {
                    let d = unit_vector(rng);
                    let end = if dot(d, ab) >= 0.0 { *b } else { *a };
                    add(end, scale(d, *radius))
                }
            }
            ProceduralShape::Torus {
                center,
                axis,
                major_radius: big,
                minor_radius: small,
            } => {
                // Area density is proportional to (R + r cos(phi)).
                let phi = loop {
                    let phi = rng.gen::<f64>() * 2.0 * PI;
                    if rng.gen::<f64>() * (big + small) <= big + small * phi.cos() {
                        break phi;
                    }
                };
                let theta = rng.gen::<f64>() * 2.0 * PI;
                let ring = big + small * phi.cos();
                let local = [ring * theta.cos(), ring * theta.sin(), small * phi.sin()];
                add(*center, from_torus_frame(local, *axis))
            }
            ProceduralShape::Union { parts } => {
                let areas: Vec<f64> = parts.iter().map(|p| p.surface_area()).collect();
                loop {
                    let k = pick_weighted(rng, &areas);
                    let p = parts[k].surface_point(rng);
                    let hidden = parts
                        .iter()
                        .enumerate()
                        .any(|(j, other)| j != k && other.sdf(p) < 0.0);
                    if !hidden {
                        break p;
                    }
                }
            }
        }
    }

    /// Random shape for the procedural dataset. Sizes are kept moderate so
    /// that every solid is resolvable by a coarse triplane.
    pub fn random(seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[rng::name_tag("shape")]);
        loop {
            let shape = match rng.gen_range(0..5) {
                0 => random_sphere(&mut rng),
                1 => random_box(&mut rng),
                2 => random_capsule(&mut rng),
                3 => random_torus(&mut rng),
                _ => {
                    let n = rng.gen_range(2..=3);
                    let anchor = random_center(&mut rng, 0.25);
                    let parts = (0..n)
                        .map(|_| {
                            let mut part = match rng.gen_range(0..3) {
                                0 => random_sphere(&mut rng),
                                1 => random_box(&mut rng),
                                _ => random_capsule(&mut rng),
                            };
                            let jitter = [0; 3].map(|_| rng.gen_range(-0.3..0.3));
                            part.translate(add(anchor, jitter));
                            part.shrink(0.7);
                            part
                        })
                        .collect();
                    ProceduralShape::Union { parts }
                }
            };
            if shape.fits_with_margin(CUBE_MARGIN) {
                return shape;
            }
        }
    }

    fn fits_with_margin(&self, margin: f64) -> bool {
        let (lo, hi) = self.bounds();
        lo.iter().chain(hi.iter()).all(|c| c.abs() <= 1.0 - margin) && self.validate().is_ok()
    }

    fn translate(&mut self, t: Point) {
        match self {
            ProceduralShape::Sphere { center, .. }
            | ProceduralShape::Box { center, .. }
            | ProceduralShape::Torus { center, .. } => *center = add(*center, t),
            ProceduralShape::Capsule { a, b, .. } => {
                *a = add(*a, t);
                *b = add(*b, t);
            }
            ProceduralShape::Union { parts } => parts.iter_mut().for_each(|p| p.translate(t)),
        }
    }

    /// Scales the solid about its own reference point.
    fn shrink(&mut self, s: f64) {
        match self {
            ProceduralShape::Sphere { radius, .. } => *radius *= s,
            ProceduralShape::Box { half_extents, .. } => *half_extents = half_extents.map(|h| h * s),
            ProceduralShape::Capsule { a, b, radius } => {
                let mid = scale(add(*a, *b), 0.5);
                *a = add(mid, scale(sub(*a, mid), s));
                *b = add(mid, scale(sub(*b, mid), s));
                *radius *= s;
            }
            ProceduralShape::Torus {
                major_radius,
                minor_radius,
                ..
            } => {
                *major_radius *= s;
                *minor_radius *= s;
            }
            ProceduralShape::Union { parts } => parts.iter_mut().for_each(|p| p.shrink(s)),
        }
    }
}

fn random_center<R: Rng>(rng: &mut R, spread: f64) -> Point {
    [0; 3].map(|_| rng.gen_range(-spread..spread))
}

fn random_sphere<R: Rng>(rng: &mut R) -> ProceduralShape {
    ProceduralShape::Sphere {
        center: random_center(rng, 0.2),
        radius: rng.gen_range(0.35..0.7),
    }
}

fn random_box<R: Rng>(rng: &mut R) -> ProceduralShape {
    ProceduralShape::Box {
        center: random_center(rng, 0.2),
        half_extents: [0; 3].map(|_| rng.gen_range(0.25..0.65)),
    }
}

fn random_capsule<R: Rng>(rng: &mut R) -> ProceduralShape {
    let c = random_center(rng, 0.15);
    let dir = unit_vector(rng);
    let half = rng.gen_range(0.2..0.45);
    ProceduralShape::Capsule {
        a: sub(c, scale(dir, half)),
        b: add(c, scale(dir, half)),
        radius: rng.gen_range(0.2..0.35),
    }
}

fn random_torus<R: Rng>(rng: &mut R) -> ProceduralShape {
    let axis = [Axis::X, Axis::Y, Axis::Z][rng.gen_range(0..3)];
    ProceduralShape::Torus {
        center: random_center(rng, 0.1),
        axis,
        major_radius: rng.gen_range(0.4..0.6),
        minor_radius: rng.gen_range(0.2..0.3),
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

pub(crate) fn unit_vector<R: Rng>(rng: &mut R) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = length(v);
        if n > 1e-12 {
            return scale(v, 1.0 / n);
        }
    }
}

fn orthonormal_pair(axis: Point) -> (Point, Point) {
    let helper = if axis[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let e1 = normalize(cross(axis, helper));
    let e2 = cross(axis, e1);
    (e1, e2)
}


/// Maps a point to `(u, v, w)` with `w` along the torus axis.
fn torus_frame(d: Point, axis: Axis) -> (f64, f64, f64) {
    match axis {
        Axis::X => (d[1], d[2], d[0]),
        Axis::Y => (d[2], d[0], d[1]),
        Axis::Z => (d[0], d[1], d[2]),
    }
}

fn from_torus_frame(l: Point, axis: Axis) -> Point {
    match axis {
        Axis::X => [l[2], l[0], l[1]],
        Axis::Y => [l[1], l[2], l[0]],
        Axis::Z => [l[0], l[1], l[2]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        let s = ProceduralShape::sphere(0.5);
        assert_eq!(s.occupancy(&[[0.0; 3], [0.9, 0.0, 0.0]]), vec![true, false]);
        let b = ProceduralShape::cube(0.4);
        assert!(b.contains([0.4, 0.0, 0.0]));
        assert!(!b.contains([0.41, 0.0, 0.0]));
    }

    #[test]
    fn sphere_surface_radius() {
        let cloud = ProceduralShape::sphere(0.5).sample_surface(1000, 3).unwrap();
        for p in cloud.points() {
            assert!((length(*p) - 0.5).abs() <= 1e-5);
        }
    }

    #[test]
    fn surface_sampling_is_deterministic() {
        let s = ProceduralShape::random(11);
        assert_eq!(s.sample_surface(64, 5).unwrap(), s.sample_surface(64, 5).unwrap());
        assert_ne!(s.sample_surface(64, 5).unwrap(), s.sample_surface(64, 6).unwrap());
    }

    #[test]
    fn surface_points_lie_on_every_kind() {
        for seed in 0..60 {
            let s = ProceduralShape::random(seed);
            s.validate().unwrap();
            let cloud = s.sample_surface(300, seed).unwrap();
            for p in cloud.points() {
                assert!(s.sdf(*p).abs() <= 1e-5, "{} off surface: {}", s.kind_name(), s.sdf(*p));
                assert!(s.contains(*p));
            }
        }
    }

    #[test]
    fn box_face_counts_follow_areas() {
        // Multinomial: each face count has mean n*p and std sqrt(n*p*(1-p)).
        let h = [0.2, 0.4, 0.6];
        let shape = ProceduralShape::Box {
            center: [0.0; 3],
            half_extents: h,
        };
        let n = 10_000;
        let cloud = shape.sample_surface(n, 42).unwrap();
        let areas = [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]];
        let total: f64 = areas.iter().sum();
        let mut counts = [0usize; 6];
        for p in cloud.points() {
            let face = (0..3)
                .find_map(|i| {
                    if (p[i] - h[i]).abs() < 1e-12 {
                        Some(2 * i)
                    } else if (p[i] + h[i]).abs() < 1e-12 {
                        Some(2 * i + 1)
                    } else {
                        None
                    }
                })
                .expect("point on a face");
            counts[face] += 1;
        }
        for f in 0..6 {
            let prob = areas[f] / total;
            let mean = n as f64 * prob;
            let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
            assert!(((counts[f] as f64) - mean).abs() <= 3.0 * sd, "face {f}: {} vs {mean}", counts[f]);
        }
    }

    #[test]
    fn random_shapes_fit_the_cube() {
        for seed in 0..200 {
            let s = ProceduralShape::random(seed);
            let (lo, hi) = s.bounds();
            assert!(lo.iter().chain(hi.iter()).all(|c| c.abs() <= 1.0 - CUBE_MARGIN));
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ProceduralShape::sphere(1.2).validate().is_err());
        assert!(ProceduralShape::sphere(-0.1).validate().is_err());
        let t = ProceduralShape::Torus {
            center: [0.0; 3],
            axis: Axis::Z,
            major_radius: 0.1,
            minor_radius: 0.2,
        };
        assert!(t.validate().is_err());
    }
}
