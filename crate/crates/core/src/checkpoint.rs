//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `SCNDIFF1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` values at the
//! byte offsets (relative to the payload start) listed in the manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ddpm::{ScheduleKind, GuidanceConfig};
use crate::denoiser::{Denoiser, DenoiserConfig, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingProvenance, LabelEmbedder, RelationVocab};
use crate::objectives::CategoryStats;
use crate::scene::Normalizer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SCNDIFF1";
const EMBEDDING_TENSOR: &str = "label_embeddings";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub config: DenoiserConfig,
    pub normalizer: Normalizer,
    pub stats: CategoryStats,
    pub labels: Vec<String>,
    pub relations: RelationVocab,
    pub provenance: EmbeddingProvenance,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

/// A trained model with everything needed to sample from and score it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub normalizer: Normalizer,
    pub stats: CategoryStats,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(&str, &Tensor)> = self.model.params().iter().collect();
        named.push((EMBEDDING_TENSOR, self.model.embedder().table()));
        let mut tensors = Vec::with_capacity(named.len());
        let mut payload = Vec::new();
        for (name, t) in &named {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            tensors,
            config: self.model.config().clone(),
            normalizer: self.normalizer.clone(),
            stats: self.stats.clone(),
            labels: self.model.embedder().labels().to_vec(),
            relations: self.model.relations().clone(),
            provenance: self.model.embedder().provenance(),
            schedule: self.schedule,
            steps: self.steps,
            guidance: self.guidance,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut params = ParamStore::new();
        let mut table = None;
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(err(format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| err(format!("tensor {} extends past the end of the file", entry.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if entry.name == EMBEDDING_TENSOR {
                table = Some(t);
            } else {
                params.insert(entry.name.clone(), t);
            }
        }
        let table = table.ok_or_else(|| err("missing label embedding table"))?;
        let embedder = LabelEmbedder::from_table(manifest.labels, table, manifest.provenance)?;
        let model = Denoiser::from_parts(manifest.config, manifest.relations, embedder, params)?;
        if !manifest.normalizer.is_fitted() {
            return Err(Error::UnfittedNormalizer);
        }
        Ok(Self {
            model,
            normalizer: manifest.normalizer,
            stats: manifest.stats,
            schedule: manifest.schedule,
            steps: manifest.steps,
            guidance: manifest.guidance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddpm::Denoise;
    use crate::graph::SceneGraph;
    use crate::scene::ROW_DIM;
    use crate::tensor::Precision;

    fn checkpoint() -> Checkpoint {
        let config = DenoiserConfig {
            n_max: 3,
            hidden: 8,
            rgcn_layers: 1,
            heads: 2,
            bases: 2,
            time_dim: 4,
            precision: Precision::F32,
            ..Default::default()
        };
        let embedder = LabelEmbedder::hash_derived(&["bed", "lamp"], 1);
        Checkpoint {
            model: Denoiser::new(config, RelationVocab::canonical(), embedder, 9).unwrap(),
            normalizer: Normalizer {
                min: vec![-1.0; ROW_DIM],
                max: vec![2.0; ROW_DIM],
            },
            stats: CategoryStats::default(),
            schedule: ScheduleKind::Linear,
            steps: 1000,
            guidance: GuidanceConfig::default(),
        }
    }

    #[test]
    fn round_trip_reproduces_outputs_bitwise() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let g = SceneGraph::new(vec!["bed".into(), "lamp".into()], vec![]);
        let cond = ck.model.condition(&g).unwrap();
        let x = Tensor::full(&[3, ROW_DIM], 0.25);
        let a = ck.model.predict(&x, 10, &cond).unwrap();
        let b = back.model.predict(&x, 10, &cond).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
        let mut bytes = checkpoint().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
