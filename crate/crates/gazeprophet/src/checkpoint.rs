//! Binary checkpoint.
//!
//! Layout, all integers little-endian: magic `GZPF`, u32 version, u32 array
//! count, then per array a u16 name length, the UTF-8 name, a u8 rank, u32
//! dims and raw f64 data. A u32-length-prefixed JSON config closes the file.

use std::path::Path;

use gazeprophet_core::model::{BaselineKind, Model, ModelDims, ModelParams};
use gazeprophet_core::params::{flatten, ParamTree};
use gazeprophet_core::train::TrainConfig;
use gazeprophet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GZPF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    Version(u32),
    #[error("truncated while reading {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the config")]
    Trailing(usize),
    #[error("array name is not UTF-8")]
    BadName,
    #[error("array '{name}': {reason}")]
    BadArray { name: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("array '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("array {index} is '{found}', expected '{expected}'")]
    UnexpectedArray { index: usize, found: String, expected: String },
    #[error("missing array '{0}'")]
    MissingArray(String),
    #[error("unexpected extra array '{0}'")]
    ExtraArray(String),
}

/// Everything a checkpoint stores besides the arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: BaselineKind,
    pub dims: ModelDims,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: Option<&TrainConfig>) -> Self {
        Self {
            config: CheckpointConfig {
                kind: model.kind,
                dims: model.dims.clone(),
                train: train.cloned(),
            },
            arrays: flatten(&model.params),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::new();
        for i in 0..count {
            let len = r.u16(&format!("name length of array {i}"))? as usize;
            let name = std::str::from_utf8(r.take(len, &format!("name of array {i}"))?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = r.take(1, &format!("rank of '{name}'"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("dims of '{name}'"))? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| CheckpointError::Truncated(format!("data of '{name}'")))?;
            let raw = r.take(n * 8, &format!("data of '{name}'"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::BadArray {
                name: name.clone(),
                reason: e.to_string(),
            })?;
            arrays.push((name, t));
        }
        let len = r.u32("config length")? as usize;
        let config = serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { config, arrays })
    }

    /// Rebuild the model described by the stored config.
    pub fn model(&self) -> Result<Model, CheckpointError> {
        self.model_as(self.config.kind, &self.config.dims)
    }

    /// Load the stored arrays into a model of the given kind and dims. The
    /// first array whose name or shape disagrees is reported.
    pub fn model_as(&self, kind: BaselineKind, dims: &ModelDims) -> Result<Model, CheckpointError> {
        dims.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
        let reference = ModelParams::init(kind, dims, 0);
        let expected = flatten(&reference);
        for (i, (name, t)) in expected.iter().enumerate() {
            let Some((found_name, found)) = self.arrays.get(i) else {
                return Err(CheckpointError::MissingArray(name.clone()));
            };
            if found_name != name {
                return Err(CheckpointError::UnexpectedArray {
                    index: i,
                    found: found_name.clone(),
                    expected: name.clone(),
                });
            }
            if found.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        if let Some((extra, _)) = self.arrays.get(expected.len()) {
            return Err(CheckpointError::ExtraArray(extra.clone()));
        }
        let mut k = 0;
        let params = reference.map_named("", &mut |_, _| {
            k += 1;
            self.arrays[k - 1].1.clone()
        });
        Model::from_params(kind, dims.clone(), params).map_err(|e| CheckpointError::Config(e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save(path: &Path, model: &Model, train: Option<&TrainConfig>) -> Result<()> {
    crate::atomic::write(path, &Checkpoint::from_model(model, train).encode())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Model, Option<TrainConfig>)> {
    let ckpt = read(path)?;
    let model = ckpt.model().map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((model, ckpt.config.train))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model::new(BaselineKind::TemporalOnly, ModelDims::desk(), 3).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = small();
        let bytes = Checkpoint::from_model(&m, Some(&TrainConfig::default())).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.model().unwrap(), m);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = Checkpoint::from_model(&small(), None).encode();
        for cut in [0, 3, 4, 9, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn header_rejections() {
        let mut bytes = Checkpoint::from_model(&small(), None).encode();
        bytes[4] = 2;
        assert_eq!(Checkpoint::decode(&bytes).unwrap_err(), CheckpointError::Version(2));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes).unwrap_err(), CheckpointError::BadMagic(_)));
    }
}
