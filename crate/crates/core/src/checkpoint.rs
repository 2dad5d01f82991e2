//! Self-describing model checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f64`
//! in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::NormStats;
use crate::error::{Error, Result};
use crate::model::StageDiffConfig;

const MAGIC: &[u8; 8] = b"SDCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Adam step counter plus first and second moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: StageDiffConfig,
    pub norm: Option<NormStats>,
    pub feature_names: Option<Vec<String>>,
    pub train_step: usize,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: StageDiffConfig,
    config_hash: String,
    ablation: String,
    norm: Option<NormStats>,
    feature_names: Option<Vec<String>>,
    train_step: usize,
    seed: u64,
    optimizer_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.arch_hash()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|(_, d)| d.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blob: Vec<&[f64]> = Vec::new();
        for (name, (shape, data)) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                kind: TensorKind::Param,
                shape: shape.clone(),
            });
            blob.push(data);
        }
        if let Some(opt) = &self.optimizer {
            for (name, (m, v)) in &opt.moments {
                for (kind, data) in [(TensorKind::AdamM, m), (TensorKind::AdamV, v)] {
                    tensors.push(TensorEntry {
                        name: name.clone(),
                        kind,
                        shape: vec![data.len()],
                    });
                    blob.push(data);
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash(),
            ablation: self.config.ablation.to_string(),
            norm: self.norm.clone(),
            feature_names: self.feature_names.clone(),
            train_step: self.train_step,
            seed: self.config.seed,
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = blob.iter().map(|b| b.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for data in blob {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(err("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        header.config.validate()?;
        if header.config_hash != header.config.arch_hash() {
            return Err(err("stored config hash does not match stored config".into()));
        }
        if let Some(norm) = &header.norm {
            norm.validate()?;
            if norm.dim() != header.config.dim {
                return Err(err("normalization width disagrees with config".into()));
            }
        }
        let mut data = &body[hlen..];
        let mut params = BTreeMap::new();
        let mut m_parts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut v_parts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for entry in header.tensors {
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= data.len()))
                .ok_or_else(|| err(format!("tensor `{}` overruns the file", entry.name)))?;
            let (head, rest) = data.split_at(count * 8);
            data = rest;
            let values: Vec<f64> = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let slot = match entry.kind {
                TensorKind::Param => params.insert(entry.name.clone(), (entry.shape, values)).map(|_| ()),
                TensorKind::AdamM => m_parts.insert(entry.name.clone(), values).map(|_| ()),
                TensorKind::AdamV => v_parts.insert(entry.name.clone(), values).map(|_| ()),
            };
            if slot.is_some() {
                return Err(err(format!("duplicate tensor `{}`", entry.name)));
            }
        }
        if !data.is_empty() {
            return Err(err(format!("{} trailing bytes", data.len())));
        }
        let optimizer = match header.optimizer_t {
            None if m_parts.is_empty() && v_parts.is_empty() => None,
            None => return Err(err("optimizer moments without a step counter".into())),
            Some(t) => {
                let mut moments = BTreeMap::new();
                for (name, m) in m_parts {
                    let v = v_parts
                        .remove(&name)
                        .ok_or_else(|| err(format!("missing second moment for `{name}`")))?;
                    if !params.contains_key(&name) {
                        return Err(err(format!("optimizer state for unknown `{name}`")));
                    }
                    moments.insert(name, (m, v));
                }
                if let Some(name) = v_parts.keys().next() {
                    return Err(err(format!("missing first moment for `{name}`")));
                }
                Some(OptimizerState { t, moments })
            }
        };
        Ok(Self {
            config: header.config,
            norm: header.norm,
            feature_names: header.feature_names,
            train_step: header.train_step,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary sibling and renames, so an interrupted
    /// save never leaves a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Drops optimizer moments, e.g. for a release artifact.
    pub fn without_optimizer(mut self) -> Self {
        self.optimizer = None;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageDiff;

    fn tiny() -> Checkpoint {
        let cfg = StageDiffConfig {
            l_ser: 16,
            stages: 2,
            dim: 2,
            scales: 1,
            l_patch: 4,
            l_win: 4,
            d_model: 4,
            heads: 1,
            pool_kernels: Some(vec![3]),
            ..Default::default()
        };
        let model = StageDiff::new(&cfg).unwrap();
        let params = model.params().to_host().unwrap();
        let moments = params
            .iter()
            .map(|(k, (_, d))| (k.clone(), (vec![0.5; d.len()], vec![0.25; d.len()])))
            .collect();
        Checkpoint {
            config: cfg,
            norm: Some(NormStats {
                min: vec![0.0, -1.0],
                max: vec![1.0, 1.0],
                epsilon: 1e-7,
            }),
            feature_names: Some(vec!["a".into(), "b".into()]),
            train_step: 7,
            params,
            optimizer: Some(OptimizerState { t: 7, moments }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = tiny();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let bare = c.clone().without_optimizer();
        assert_eq!(Checkpoint::decode(&bare.encode()).unwrap(), bare);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = tiny();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::decode(&version).is_err());
        assert!(Checkpoint::decode(&[]).is_err());
    }

    #[test]
    fn rejects_tampered_config() {
        let c = tiny();
        let bytes = c.encode();
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        let tampered = header.replace("\"d_model\":4", "\"d_model\":6");
        assert_eq!(tampered.len(), header.len());
        let mut out = bytes[..16].to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + hlen..]);
        assert!(matches!(Checkpoint::decode(&out), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn loaded_model_matches() {
        let c = tiny();
        let model = StageDiff::from_checkpoint(&c).unwrap();
        assert_eq!(model.params().to_host().unwrap(), c.params);
        let mut wrong = c.clone();
        wrong.params.remove("step_proj.weight");
        assert!(StageDiff::from_checkpoint(&wrong).is_err());
    }
}
