//! Raw array export: little-endian f32 data plus a JSON sidecar describing
//! its layout.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::decoder::{Triplane, PLANE_NAMES};
use crate::error::{invalid, write_file, Error, Result};
use crate::fields::OccupancyGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub kind: String,
    pub dtype: String,
    /// Row-major shape of the raw data.
    pub shape: Vec<usize>,
    /// Name of each axis in `shape`.
    pub axes: Vec<String>,
    /// Coordinate range covered by spatial axes.
    pub extent: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluated: Option<usize>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

fn write_pair(stem: &Path, sidecar: &Sidecar, data: &[f32]) -> Result<(PathBuf, PathBuf)> {
    let expected: usize = sidecar.shape.iter().product();
    if expected != data.len() {
        return Err(Error::Internal(format!("sidecar shape {:?} does not match {} values", sidecar.shape, data.len())));
    }
    let (raw, json) = paths(stem);
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&raw, bytes)?;
    write_file(&json, serde_json::to_vec_pretty(sidecar)?)?;
    Ok((raw, json))
}

/// Writes sample `index` of a triplane as `(3, R, R, C)` with plane order
/// xy, yz, xz. Rows index the plane's second coordinate, columns its first.
pub fn write_triplane(stem: impl AsRef<Path>, triplane: &Triplane, index: usize) -> Result<(PathBuf, PathBuf)> {
    if index >= triplane.batch() {
        return Err(invalid!("triplane index {index} out of range for batch {}", triplane.batch()));
    }
    let (r, c) = (triplane.resolution(), triplane.channels());
    let data: Vec<f32> = triplane.planes.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let sidecar = Sidecar {
        kind: "triplane".into(),
        dtype: "f32".into(),
        shape: vec![3, r, r, c],
        axes: vec!["plane".into(), "row".into(), "column".into(), "channel".into()],
        extent: [-1.0, 1.0],
        planes: PLANE_NAMES.iter().map(|s| s.to_string()).collect(),
        evaluated: None,
    };
    write_pair(stem.as_ref(), &sidecar, &data)
}

/// Writes occupancy probabilities as `(R, R, R)` indexed `[x][y][z]` on the
/// vertex lattice spanning the extent. Unevaluated points hold 0.
pub fn write_grid(stem: impl AsRef<Path>, grid: &OccupancyGrid) -> Result<(PathBuf, PathBuf)> {
    let r = grid.resolution;
    let sidecar = Sidecar {
        kind: "occupancy_grid".into(),
        dtype: "f32".into(),
        shape: vec![r, r, r],
        axes: vec!["x".into(), "y".into(), "z".into()],
        extent: [-1.0, 1.0],
        planes: Vec::new(),
        evaluated: Some(grid.evaluated_count()),
    };
    write_pair(stem.as_ref(), &sidecar, &grid.values)
}

/// Reads an array written by this module.
pub fn read_raw(stem: impl AsRef<Path>) -> Result<(Sidecar, Vec<f32>)> {
    let (raw, json) = paths(stem.as_ref());
    let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::Data(format!("{}: {e}", json.display())))?;
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected: usize = sidecar.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Data(format!("{} holds {} bytes, sidecar expects {}", raw.display(), bytes.len(), expected * 4)));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((sidecar, data))
}
