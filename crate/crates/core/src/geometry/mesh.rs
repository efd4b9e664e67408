use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::{add, cross, length, normalize, scale, sub, Point, PointCloud};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Fraction of queries whose inside/outside verdict may differ between the
/// three ray directions before a mesh is declared open.
pub const OPEN_MESH_TOLERANCE: f64 = 0.01;

/// Triangles with area at or below this are dropped by [`Mesh::cleanup`].
const DEGENERATE_AREA: f64 = 1e-14;

/// Indexed triangle mesh.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(invalid!("face {f:?} references a vertex beyond {n}"));
        }
        Ok(Mesh { vertices, faces })
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        0.5 * length(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Drops zero-area faces and faces with repeated vertex indices.
    pub fn cleanup(mut self) -> Self {
        let keep: Vec<[usize; 3]> = (0..self.faces.len())
            .filter(|&f| {
                let [a, b, c] = self.faces[f];
                a != b && b != c && a != c && self.face_area(f) > DEGENERATE_AREA
            })
            .map(|f| self.faces[f])
            .collect();
        self.faces = keep;
        self
    }

    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        Some((lo, hi))
    }

    /// Centers the bounding box at the origin and scales uniformly so the
    /// longest axis spans `2 * (1 - margin)`.
    pub fn normalize_to_unit_cube(&self, margin: f64) -> Result<Mesh> {
        if !(0.0..1.0).contains(&margin) {
            return Err(invalid!("margin must lie in [0, 1), got {margin}"));
        }
        let (lo, hi) = self
            .bounds()
            .ok_or_else(|| invalid!("cannot normalize an empty mesh"))?;
        let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
        if !(extent > 0.0) {
            return Err(invalid!("mesh has zero extent"));
        }
        let center = [0, 1, 2].map(|i| 0.5 * (lo[i] + hi[i]));
        let s = 2.0 * (1.0 - margin) / extent;
        Ok(Mesh {
            vertices: self.vertices.iter().map(|v| scale(sub(*v, center), s)).collect(),
            faces: self.faces.clone(),
        })
    }

    pub fn scaled(&self, s: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| scale(*v, s)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Area-uniform surface samples.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if self.faces.is_empty() {
            return Err(invalid!("cannot sample the surface of an empty mesh"));
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            acc += self.face_area(f);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(invalid!("mesh has zero surface area"));
        }
        let mut r = rng::stream(seed, &[rng::name_tag("mesh-surface")]);
        let points = (0..n)
            .map(|_| {
                let t = r.gen::<f64>() * acc;
                let f = cdf.partition_point(|c| *c <= t).min(cdf.len() - 1);
                let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
                let (mut u, mut v): (f64, f64) = (r.gen(), r.gen());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                add(a, add(scale(sub(b, a), u), scale(sub(c, a), v)))
            })
            .collect();
        PointCloud::new(points)
    }

    /// Inside/outside labels by ray-crossing parity along +x.
    ///
    /// Parity is also computed along +y and +z; when the three directions
    /// disagree on more than [`OPEN_MESH_TOLERANCE`] of the queries the mesh
    /// is reported as open.
    pub fn occupancy(&self, queries: &[Point]) -> Result<Vec<bool>> {
        if self.faces.is_empty() || queries.is_empty() {
            return Ok(vec![false; queries.len()]);
        }
        let casters: Vec<RayCaster> = (0..3).map(|axis| RayCaster::new(self, axis)).collect();
        let mut labels = Vec::with_capacity(queries.len());
        let mut disagreements = 0usize;
        for q in queries {
            let votes = casters.iter().map(|c| c.inside(*q)).collect::<Vec<_>>();
            if votes[1] != votes[0] || votes[2] != votes[0] {
                disagreements += 1;
            }
            labels.push(votes[0]);
        }
        let frac = disagreements as f64 / queries.len() as f64;
        if frac > OPEN_MESH_TOLERANCE {
            return Err(Error::Data(format!(
                "mesh appears open: ray directions disagree on {:.2}% of queries",
                100.0 * frac
            )));
        }
        Ok(labels)
    }

    /// Parity along a single axis (0 = x, 1 = y, 2 = z).
    pub fn occupancy_along(&self, queries: &[Point], axis: usize) -> Vec<bool> {
        let caster = RayCaster::new(self, axis);
        queries.iter().map(|q| caster.inside(*q)).collect()
    }

    /// Number of faces using each undirected edge.
    pub fn edge_use_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    /// Parses `v` and `f` records; other record types are ignored. Polygonal
    /// faces are fan-triangulated and `v/vt/vn` index forms are accepted.
    pub fn from_obj(text: &str) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Data(format!("line {}: bad vertex: {e}", lineno + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Data(format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head
                                .parse()
                                .map_err(|e| Error::Data(format!("line {}: bad face index: {e}", lineno + 1)))?;
                            let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            usize::try_from(resolved)
                                .map_err(|_| Error::Data(format!("line {}: face index {i} out of range", lineno + 1)))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::Data(format!("line {}: face needs 3 indices", lineno + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Mesh::new(vertices, faces).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::error::write_file(path, self.to_obj())
    }

    pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_obj(&text)
    }

    /// Closed axis-aligned cube with outward-facing triangles.
    pub fn cube(half_extent: f64) -> Mesh {
        let h = half_extent;
        let vertices = (0..8)
            .map(|i| {
                [
                    if i & 1 == 0 { -h } else { h },
                    if i & 2 == 0 { -h } else { h },
                    if i & 4 == 0 { -h } else { h },
                ]
            })
            .collect();
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // z-
            [4, 5, 6], [5, 7, 6], // z+
            [0, 1, 4], [1, 5, 4], // y-
            [2, 6, 3], [3, 6, 7], // y+
            [0, 4, 2], [2, 4, 6], // x-
            [1, 3, 5], [3, 7, 5], // x+
        ];
        Mesh { vertices, faces }
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Mesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point> = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| normalize(*v))
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Point>| -> usize {
                *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push(normalize(scale(add(verts[a], verts[b]), 0.5)));
                    verts.len() - 1
                })
            };
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Mesh {
            vertices: vertices.into_iter().map(|v| scale(v, radius)).collect(),
            faces,
        }
    }
}

/// Axis-aligned ray caster with triangles binned on the orthogonal plane.
struct RayCaster<'a> {
    mesh: &'a Mesh,
    axis: usize,
    u: usize,
    v: usize,
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    bins: Vec<Vec<usize>>,
    nudge: f64,
}

impl<'a> RayCaster<'a> {
    fn new(mesh: &'a Mesh, axis: usize) -> Self {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let (lo, hi) = mesh.bounds().expect("non-empty mesh");
        let span = (hi[u] - lo[u]).max(hi[v] - lo[v]).max(1e-12);
        let per_side = ((mesh.faces.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let cell = span / per_side as f64 * (1.0 + 1e-9);
        let dims = [
            (((hi[u] - lo[u]) / cell).floor() as usize + 1).max(1),
            (((hi[v] - lo[v]) / cell).floor() as usize + 1).max(1),
        ];
        let mut bins = vec![Vec::new(); dims[0] * dims[1]];
        let origin = [lo[u], lo[v]];
        for (fi, f) in mesh.faces.iter().enumerate() {
            let pts = f.map(|i| mesh.vertices[i]);
            let umin = pts.iter().map(|p| p[u]).fold(f64::INFINITY, f64::min);
            let umax = pts.iter().map(|p| p[u]).fold(f64::NEG_INFINITY, f64::max);
            let vmin = pts.iter().map(|p| p[v]).fold(f64::INFINITY, f64::min);
            let vmax = pts.iter().map(|p| p[v]).fold(f64::NEG_INFINITY, f64::max);
            let i0 = ((umin - origin[0]) / cell).floor().max(0.0) as usize;
            let i1 = (((umax - origin[0]) / cell).floor() as usize).min(dims[0] - 1);
            let j0 = ((vmin - origin[1]) / cell).floor().max(0.0) as usize;
            let j1 = (((vmax - origin[1]) / cell).floor() as usize).min(dims[1] - 1);
            for i in i0..=i1 {
                for j in j0..=j1 {
                    bins[i * dims[1] + j].push(fi);
                }
            }
        }
        RayCaster {
            mesh,
            axis,
            u,
            v,
            origin,
            cell,
            dims,
            bins,
            nudge: span * 1e-7,
        }
    }

    fn inside(&self, q: Point) -> bool {
        // Rays grazing an edge or vertex are retried from slightly shifted
        // origins along a fixed low-discrepancy sequence.
        for k in 0..16 {
            let shift = k as f64 * self.nudge;
            let pu = q[self.u] + shift * 0.754_877_666_2;
            let pv = q[self.v] + shift * 0.569_840_290_9;
            if let Some(parity) = self.parity(pu, pv, q[self.axis]) {
                return parity;
            }
        }
        false
    }

    fn parity(&self, pu: f64, pv: f64, start: f64) -> Option<bool> {
        let i = (pu - self.origin[0]) / self.cell;
        let j = (pv - self.origin[1]) / self.cell;
        if i < 0.0 || j < 0.0 || i >= self.dims[0] as f64 || j >= self.dims[1] as f64 {
            return Some(false);
        }
        let bin = &self.bins[i as usize * self.dims[1] + j as usize];
        let mut crossings = 0usize;
        for &fi in bin {
            let [a, b, c] = self.mesh.faces[fi].map(|k| self.mesh.vertices[k]);
            let (au, av) = (a[self.u] - pu, a[self.v] - pv);
            let (bu, bv) = (b[self.u] - pu, b[self.v] - pv);
            let (cu, cv) = (c[self.u] - pu, c[self.v] - pv);
            let w0 = bu * cv - bv * cu;
            let w1 = cu * av - cv * au;
            let w2 = au * bv - av * bu;
            let area = w0 + w1 + w2;
            if area.abs() < 1e-18 {
                continue;
            }
            let eps = 1e-12 * area.abs().max(1e-12);
            let on_edge = |w: f64| w.abs() <= eps;
            let positive = w0 > 0.0 && w1 > 0.0 && w2 > 0.0;
            let negative = w0 < 0.0 && w1 < 0.0 && w2 < 0.0;
            if !(positive || negative) {
                let touches = [w0, w1, w2].iter().any(|w| on_edge(*w))
                    && [w0, w1, w2].iter().all(|w| on_edge(*w) || (*w > 0.0) == (area > 0.0));
                if touches {
                    return None;
                }
                continue;
            }
            let hit = (w0 * a[self.axis] + w1 * b[self.axis] + w2 * c[self.axis]) / area;
            if hit > start {
                crossings += 1;
            }
        }
        Some(crossings % 2 == 1)
    }
}
