use rand::Rng;

use super::{squared_distance, Point};
use crate::error::{invalid, Result};
use crate::rng;

/// Farthest-point sampling with the first index drawn uniformly from `seed`.
pub fn farthest_point_sample(points: &[Point], k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(invalid!("farthest_point_sample on an empty point set"));
    }
    let start = rng::stream(seed, &[rng::name_tag("fps")]).gen_range(0..points.len());
    farthest_point_sample_from(points, k, start)
}

/// Farthest-point sampling from an explicit first index.
///
/// Each step picks the unselected point with the largest squared distance to
/// the selected set; ties go to the lowest index.
pub fn farthest_point_sample_from(points: &[Point], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(invalid!("farthest_point_sample needs 1 <= k <= N (k={k}, N={n})"));
    }
    if start >= n {
        return Err(invalid!("start index {start} out of range for {n} points"));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let anchor = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = squared_distance(points[i], anchor);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}
