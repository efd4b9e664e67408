use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProceduralShape;
use crate::error::{invalid, Error, Result};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub shape: ProceduralShape,
}

/// List of procedural shapes with the seeds that regenerate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Generates `count` shapes. Entry `i` depends only on `(seed, i)`.
    pub fn generate(seed: u64, count: usize) -> Self {
        Self::generate_range(seed, 0..count)
    }

    /// One shard of a dataset.
    pub fn generate_range(seed: u64, ids: std::ops::Range<usize>) -> Self {
        let entries = ids
            .map(|id| {
                let shape_seed = rng::derive_seed(seed, &[rng::name_tag("dataset"), id as u64]);
                ManifestEntry {
                    id,
                    seed: shape_seed,
                    shape: ProceduralShape::random(shape_seed),
                }
            })
            .collect();
        DatasetManifest {
            version: MANIFEST_VERSION,
            seed,
            entries,
        }
    }

    /// Concatenates shards in id order.
    pub fn merge(shards: impl IntoIterator<Item = DatasetManifest>) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        for s in shards {
            if seed.is_some_and(|x| x != s.seed) {
                return Err(invalid!("cannot merge shards generated from different seeds"));
            }
            seed = Some(s.seed);
            entries.extend(s.entries);
        }
        entries.sort_by_key(|e| e.id);
        Ok(DatasetManifest {
            version: MANIFEST_VERSION,
            seed: seed.unwrap_or(0),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::NotFound(format!("shape id {id} is not in the dataset")))
    }

    pub fn shapes(&self) -> Vec<ProceduralShape> {
        self.entries.iter().map(|e| e.shape.clone()).collect()
    }

    /// Checks that every entry regenerates from its seed and is valid.
    pub fn verify(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", self.version)));
        }
        for e in &self.entries {
            e.shape
                .validate()
                .map_err(|err| Error::Data(format!("entry {}: {err}", e.id)))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
        m.verify()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::error::write_file(path, self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
