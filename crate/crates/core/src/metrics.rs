//! Reconstruction and generation metrics.
//!
//! Chamfer distance is the sum of the two mean nearest-neighbour Euclidean
//! distances (not squared). IoU and F-score are reported in percent.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::OccupancyField;
use crate::geometry::{squared_distance, uniform_cube_points, Mesh, Point, PointCloud, ProceduralShape};
use crate::rng;

pub const DEFAULT_IOU_QUERIES: usize = 50_000;
pub const DEFAULT_FSCORE_THRESHOLD: f64 = 0.02;
pub const COMPLEX_FSCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_SET_POINTS: usize = 2048;

/// Anything that can label points inside or outside.
pub trait Occupancy {
    fn occupied(&self, points: &[Point]) -> Result<Vec<bool>>;
}

/// Anything that can produce surface samples.
pub trait Surface {
    fn surface_points(&self, n: usize, seed: u64) -> Result<PointCloud>;
}

impl Occupancy for ProceduralShape {
    fn occupied(&self, points: &[Point]) -> Result<Vec<bool>> {
        Ok(points.iter().map(|&p| self.contains(p)).collect())
    }
}

impl Surface for ProceduralShape {
    fn surface_points(&self, n: usize, seed: u64) -> Result<PointCloud> {
        self.sample_surface(n, seed)
    }
}

impl Occupancy for Mesh {
    fn occupied(&self, points: &[Point]) -> Result<Vec<bool>> {
        if self.faces.is_empty() {
            return Ok(vec![false; points.len()]);
        }
        self.occupancy(points)
    }
}

impl Surface for Mesh {
    fn surface_points(&self, n: usize, seed: u64) -> Result<PointCloud> {
        self.sample_surface(n, seed)
    }
}

impl Occupancy for OccupancyField {
    fn occupied(&self, points: &[Point]) -> Result<Vec<bool>> {
        Ok(self.occupancy(points, 0.5))
    }
}

/// IoU in percent of two label vectors. An empty union counts as 100.
pub fn iou_from_labels(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("label vectors differ in length: {} vs {}", a.len(), b.len()));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        log::warn!("IoU with an empty union; reporting 100%");
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Volumetric IoU over `n` uniform samples of [-1, 1]³.
pub fn iou_volumetric(a: &dyn Occupancy, reference: &dyn Occupancy, n: usize, seed: u64) -> Result<f64> {
    let pts = uniform_cube_points(n, seed);
    iou_from_labels(&a.occupied(&pts)?, &reference.occupied(&pts)?)
}

/// Surface samples of `reference` perturbed by isotropic Gaussian noise and
/// clamped to the cube.
pub fn near_surface_points(reference: &dyn Surface, n: usize, sigma: f64, seed: u64) -> Result<Vec<Point>> {
    if sigma <= 0.0 {
        return Err(invalid!("near-surface sigma must be positive, got {sigma}"));
    }
    let surf = reference.surface_points(n, rng::derive_seed(seed, &[0]))?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Internal(e.to_string()))?;
    let mut r = rng::stream(seed, &[1]);
    Ok(surf
        .points()
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] + normal.sample(&mut r)).clamp(-1.0, 1.0)))
        .collect())
}

/// IoU restricted to a near-surface query distribution around `reference`.
pub fn iou_near_surface<R: Occupancy + Surface>(
    a: &dyn Occupancy,
    reference: &R,
    n: usize,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let pts = near_surface_points(reference, n, sigma, seed)?;
    iou_from_labels(&a.occupied(&pts)?, &reference.occupied(&pts)?)
}

fn nearest_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|&a| to.iter().map(|&b| squared_distance(a, b)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

fn check_sets(a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid!("point sets must be non-empty ({} and {} points)", a.len(), b.len()));
    }
    Ok(())
}

/// `mean_a min_b |a-b| + mean_b min_a |a-b|`, computed exactly.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    check_sets(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(nearest_distances(a, b)) + mean(nearest_distances(b, a)))
}

/// Harmonic mean, in percent, of the fraction of `a` within `tau` of `b`
/// and the fraction of `b` within `tau` of `a`.
pub fn f_score(a: &[Point], b: &[Point], tau: f64) -> Result<f64> {
    check_sets(a, b)?;
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let precision = frac(nearest_distances(a, b));
    let recall = frac(nearest_distances(b, a));
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    /// Mean over reference shapes of the CD to the closest generated shape.
    pub mmd: f64,
    /// Percent of reference shapes that are some generated shape's nearest.
    pub cov: f64,
    /// Leave-one-out 1-NN accuracy in percent; `None` when set sizes differ.
    pub one_nna: Option<f64>,
}

/// MMD, COV and 1-NNA under Chamfer distance.
///
/// In 1-NNA, a sample whose nearest distances to its own set and to the
/// other set are equal counts as matched across sets, so identical sets
/// score 0%.
pub fn set_metrics(generated: &[Vec<Point>], reference: &[Vec<Point>]) -> Result<SetMetrics> {
    if generated.is_empty() || reference.is_empty() {
        return Err(invalid!("set metrics need non-empty generated and reference sets"));
    }
    let cd = |a: &[Point], b: &[Point]| chamfer_distance(a, b);
    let gr: Vec<Vec<f64>> = generated
        .iter()
        .map(|g| reference.iter().map(|r| cd(g, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mmd = (0..reference.len())
        .map(|j| gr.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / reference.len() as f64;
    let mut covered = vec![false; reference.len()];
    for row in &gr {
        let (best, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        covered[best] = true;
    }
    let cov = 100.0 * covered.iter().filter(|&&c| c).count() as f64 / reference.len() as f64;
    let one_nna = if generated.len() == reference.len() { Some(one_nna(generated, reference, &gr)?) } else { None };
    Ok(SetMetrics { mmd, cov, one_nna })
}

/// 1-NNA on equally sized sets; errors when the sizes differ.
pub fn one_nearest_neighbour_accuracy(generated: &[Vec<Point>], reference: &[Vec<Point>]) -> Result<f64> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(invalid!(
            "1-NNA needs equally sized non-empty sets, got {} and {}",
            generated.len(),
            reference.len()
        ));
    }
    let gr: Vec<Vec<f64>> = generated
        .iter()
        .map(|g| reference.iter().map(|r| chamfer_distance(g, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    one_nna(generated, reference, &gr)
}

fn one_nna(generated: &[Vec<Point>], reference: &[Vec<Point>], gr: &[Vec<f64>]) -> Result<f64> {
    let within = |set: &[Vec<Point>]| -> Result<Vec<Vec<f64>>> {
        let n = set.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = chamfer_distance(&set[i], &set[j])?;
                m[i][j] = d;
                m[j][i] = d;
            }
        }
        Ok(m)
    };
    let gg = within(generated)?;
    let rr = within(reference)?;
    let min_except = |row: &[f64], skip: usize| {
        row.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, &v)| v).fold(f64::INFINITY, f64::min)
    };
    let mut correct = 0;
    for i in 0..generated.len() {
        let same = min_except(&gg[i], i);
        let cross = gr[i].iter().cloned().fold(f64::INFINITY, f64::min);
        correct += (same < cross) as usize;
    }
    for j in 0..reference.len() {
        let same = min_except(&rr[j], j);
        let cross = gr.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min);
        correct += (same < cross) as usize;
    }
    Ok(100.0 * correct as f64 / (generated.len() + reference.len()) as f64)
}

/// Per-sample values of one metric together with their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub parameters: serde_json::Value,
    pub values: Vec<f64>,
    pub mean: f64,
}

impl MetricReport {
    pub fn new(metric: &str, parameters: serde_json::Value, values: Vec<f64>) -> Self {
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        MetricReport { metric: metric.to_string(), parameters, values, mean }
    }
}

/// Renders reports as an aligned text table, one row per sample.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:>8}", "sample");
    for r in reports {
        out.push_str(&format!(" {:>12}", r.metric));
    }
    out.push('\n');
    let rows = reports.iter().map(|r| r.values.len()).max().unwrap_or(0);
    for i in 0..rows {
        out.push_str(&format!("{i:>8}"));
        for r in reports {
            match r.values.get(i) {
                Some(v) => out.push_str(&format!(" {v:>12.4}")),
                None => out.push_str(&format!(" {:>12}", "-")),
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("{:>8}", "mean"));
    for r in reports {
        out.push_str(&format!(" {:>12.4}", r.mean));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 3]]) -> Vec<Point> {
        v.to_vec()
    }

    #[test]
    fn iou_examples() {
        let s = ProceduralShape::sphere(0.5);
        assert_eq!(iou_volumetric(&s, &s, 5000, 1).unwrap(), 100.0);
        let other = ProceduralShape::Sphere { center: [0.6, 0.6, 0.6], radius: 0.2 };
        assert_eq!(iou_volumetric(&s, &other, 20000, 1).unwrap(), 0.0);
        let cube = ProceduralShape::cube(0.5);
        let want = 100.0 * std::f64::consts::PI / 6.0;
        assert!((iou_volumetric(&s, &cube, DEFAULT_IOU_QUERIES, 2).unwrap() - want).abs() < 1.0);
        assert_eq!(iou_from_labels(&[false, false], &[false, false]).unwrap(), 100.0);
        assert!(iou_from_labels(&[true], &[]).is_err());
    }

    #[test]
    fn near_surface_iou() {
        let s = ProceduralShape::sphere(0.5);
        assert_eq!(iou_near_surface(&s, &s, 5000, 0.05, 0).unwrap(), 100.0);
        let bigger = ProceduralShape::sphere(0.55);
        let near = iou_near_surface(&bigger, &s, 20000, 0.05, 0).unwrap();
        assert!(near < 90.0);
    }

    #[test]
    fn wide_noise_spreads_toward_the_volume() {
        let a = ProceduralShape::sphere(0.5);
        let b = ProceduralShape::cube(0.45);
        let narrow = iou_near_surface(&a, &b, 40000, 0.01, 3).unwrap();
        let wide = iou_near_surface(&a, &b, 40000, 0.4, 3).unwrap();
        let volume = iou_volumetric(&a, &b, 40000, 3).unwrap();
        assert!((wide - volume).abs() < (narrow - volume).abs(), "{narrow} {wide} {volume}");
    }

    #[test]
    fn chamfer_examples() {
        let a = pts(&[[0.0, 0.0, 0.0]]);
        let b = pts(&[[0.02, 0.0, 0.0]]);
        assert!((chamfer_distance(&a, &b).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(chamfer_distance(&a, &[]).is_err());
    }

    /// Nested loops with explicit square roots, independent of the library.
    fn brute_cd(a: &[Point], b: &[Point]) -> f64 {
        let mut s1 = 0.0;
        for p in a {
            let mut best = f64::MAX;
            for q in b {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            s1 += best;
        }
        let mut s2 = 0.0;
        for q in b {
            let mut best = f64::MAX;
            for p in a {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            s2 += best;
        }
        s1 / a.len() as f64 + s2 / b.len() as f64
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        let a = uniform_cube_points(100, 1);
        let b = uniform_cube_points(80, 2);
        let cd = chamfer_distance(&a, &b).unwrap();
        assert_eq!(cd, brute_cd(&a, &b));
        assert_eq!(cd, chamfer_distance(&b, &a).unwrap());
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert_eq!(chamfer_distance(&a, &shuffled).unwrap(), 0.0);
    }

    #[test]
    fn fscore_examples() {
        let a = uniform_cube_points(200, 3);
        assert_eq!(f_score(&a, &a, 0.02).unwrap(), 100.0);
        let far: Vec<Point> = a.iter().map(|p| [p[0] + 5.0, p[1], p[2]]).collect();
        assert_eq!(f_score(&a, &far, 0.02).unwrap(), 0.0);
        let b = uniform_cube_points(200, 4);
        let mut last = 0.0;
        for tau in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let f = f_score(&a, &b, tau).unwrap();
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn identical_sets() {
        let sets: Vec<Vec<Point>> = (0..4).map(|i| uniform_cube_points(64, i)).collect();
        let m = set_metrics(&sets, &sets).unwrap();
        assert_eq!(m.mmd, 0.0);
        assert_eq!(m.cov, 100.0);
        assert_eq!(m.one_nna, Some(0.0));
    }

    #[test]
    fn two_shape_hand_computation() {
        // Single-point shapes on a line: g0=0, g1=1, r0=0.1, r1=3.
        // CD between single points is twice their distance.
        let p = |x: f64| vec![[x, 0.0, 0.0]];
        let gen = vec![p(0.0), p(1.0)];
        let reference = vec![p(0.1), p(3.0)];
        let m = set_metrics(&gen, &reference).unwrap();
        // MMD: r0 -> min(0.2, 1.8) = 0.2; r1 -> min(6, 4) = 4.
        assert!((m.mmd - 2.1).abs() < 1e-12);
        // Both generated shapes are nearest to r0.
        assert_eq!(m.cov, 50.0);
        // g0: same 2.0 vs cross 0.2 -> wrong; g1: same 2.0 vs cross 1.8 -> wrong;
        // r0: same 5.8 vs cross 0.2 -> wrong; r1: same 5.8 vs cross 4.0 -> wrong.
        assert_eq!(m.one_nna, Some(0.0));
        let far_ref = vec![p(10.0), p(10.5)];
        assert_eq!(one_nearest_neighbour_accuracy(&gen, &far_ref).unwrap(), 100.0);
        assert!(one_nearest_neighbour_accuracy(&gen, &far_ref[..1]).is_err());
        assert_eq!(set_metrics(&gen, &far_ref[..1]).unwrap().one_nna, None);
    }

    #[test]
    fn monte_carlo_error_shrinks_with_samples() {
        let a = ProceduralShape::sphere(0.5);
        let b = ProceduralShape::cube(0.5);
        let spread = |n: usize| {
            let v: Vec<f64> = (0..40).map(|s| iou_volumetric(&a, &b, n, 100 + s).unwrap()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let ratio = spread(2000) / spread(8000);
        assert!((ratio - 2.0).abs() < 0.4 * 2.0, "{ratio}");
    }

    #[test]
    fn report_mean_and_table() {
        let r = MetricReport::new("iou", serde_json::json!({"n": 3}), vec![1.0, 2.0, 3.0]);
        assert_eq!(r.mean, 2.0);
        let t = format_table(&[r]);
        assert!(t.contains("mean") && t.contains("2.0000"));
    }
}
