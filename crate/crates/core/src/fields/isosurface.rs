use std::collections::HashMap;

use super::grid::{lattice_coordinate, OccupancyGrid};
use crate::error::{invalid, Result};
use crate::geometry::{Mesh, Point};

/// Corner offsets of a lattice cube; bit 0 is x, bit 1 is y, bit 2 is z.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Six tetrahedra around the 0-7 diagonal. Every cube is split the same way,
/// so neighbouring cubes agree on the diagonal of their shared face and the
/// surface closes up across cells.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Isosurface of `grid` at `threshold` by marching tetrahedra.
///
/// A lattice point is inside when its value is at least `threshold`;
/// unevaluated points count as outside. The surface is not closed against
/// the grid boundary, so a grid that is entirely inside yields an empty mesh.
/// Faces are oriented with normals pointing outward.
pub fn extract_mesh(grid: &OccupancyGrid, threshold: f64) -> Result<Mesh> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid!("iso threshold {threshold} outside (0, 1)"));
    }
    let r = grid.resolution;
    if grid.values.len() != r * r * r || grid.evaluated.len() != r * r * r {
        return Err(invalid!("grid arrays do not match resolution {r}"));
    }
    let thr = threshold as f32;
    let value = |i: usize| if grid.evaluated[i] { grid.values[i] } else { 0.0 };
    let mut vertices: Vec<Point> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();

    for x in 0..r.saturating_sub(1) {
        for y in 0..r - 1 {
            for z in 0..r - 1 {
                let ids: [usize; 8] = CORNERS.map(|c| ((x + c[0]) * r + y + c[1]) * r + z + c[2]);
                let vals: [f32; 8] = ids.map(value);
                let inside = vals.map(|v| v >= thr);
                if inside.iter().all(|&b| b) || inside.iter().all(|&b| !b) {
                    continue;
                }
                for tet in TETS {
                    let mut vertex = |a: usize, b: usize| -> usize {
                        let (ia, ib) = (ids[a], ids[b]);
                        let key = (ia.min(ib), ia.max(ib));
                        *edge_vertex.entry(key).or_insert_with(|| {
                            let (va, vb) = (vals[a] as f64, vals[b] as f64);
                            let t = ((threshold - va) / (vb - va)).clamp(0.0, 1.0);
                            let pa = grid.point(ia);
                            let pb = grid.point(ib);
                            vertices.push([0, 1, 2].map(|k| pa[k] + t * (pb[k] - pa[k])));
                            vertices.len() - 1
                        })
                    };
                    let ins: Vec<usize> = tet.iter().copied().filter(|&c| inside[c]).collect();
                    let outs: Vec<usize> = tet.iter().copied().filter(|&c| !inside[c]).collect();
                    let tris: Vec<[usize; 3]> = match (ins.len(), outs.len()) {
                        (1, 3) => vec![[vertex(ins[0], outs[0]), vertex(ins[0], outs[1]), vertex(ins[0], outs[2])]],
                        (3, 1) => vec![[vertex(ins[0], outs[0]), vertex(ins[1], outs[0]), vertex(ins[2], outs[0])]],
                        (2, 2) => {
                            let a = vertex(ins[0], outs[0]);
                            let b = vertex(ins[0], outs[1]);
                            let c = vertex(ins[1], outs[1]);
                            let d = vertex(ins[1], outs[0]);
                            vec![[a, b, c], [a, c, d]]
                        }
                        _ => continue,
                    };
                    let corner = |c: usize| [x + CORNERS[c][0], y + CORNERS[c][1], z + CORNERS[c][2]].map(|i| lattice_coordinate(i, r));
                    let centroid = |cs: &[usize]| {
                        let mut m = [0.0; 3];
                        for &c in cs {
                            let p = corner(c);
                            for k in 0..3 {
                                m[k] += p[k] / cs.len() as f64;
                            }
                        }
                        m
                    };
                    let (ci, co) = (centroid(&ins), centroid(&outs));
                    let outward = [co[0] - ci[0], co[1] - ci[1], co[2] - ci[2]];
                    for t in tris {
                        let [p, q, s] = t.map(|i| vertices[i]);
                        let n = crate::geometry::cross(
                            crate::geometry::sub(q, p),
                            crate::geometry::sub(s, p),
                        );
                        if crate::geometry::dot(n, outward) < 0.0 {
                            faces.push([t[0], t[2], t[1]]);
                        } else {
                            faces.push(t);
                        }
                    }
                }
            }
        }
    }
    Mesh::new(vertices, faces)
}
