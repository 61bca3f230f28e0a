//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RLNV2CKP" | u32 version | u64 header length | JSON header | f64 data
//! ```
//!
//! The header holds the [`ModelConfig`], integer metadata and the name and
//! shape of every array; array data follows in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RLNV2CKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    meta: BTreeMap<String, u64>,
    arrays: Vec<ArrayHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, u64>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = self.arrays.iter().map(|a| a.data.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| format!("bad header: {e}"))?;
        let mut pos = 20 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| format!("truncated data for '{}'", a.name))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            arrays.push(NamedArray {
                name: a.name,
                shape: a.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(Checkpoint {
            config: header.config,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

fn stats_names(name: &str) -> [String; 2] {
    [format!("{name}.running_mean"), format!("{name}.running_var")]
}

impl Model {
    /// Parameters and running statistics with their names prefixed by
    /// `prefix`.
    pub fn state_arrays(&self, prefix: &str) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for p in &self.store.params {
            out.push(NamedArray {
                name: format!("{prefix}{}", p.name),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
        for (name, s) in &self.store.stats {
            let [m, v] = stats_names(name);
            for (n, vals) in [(m, &s.mean), (v, &s.var)] {
                out.push(NamedArray {
                    name: format!("{prefix}{n}"),
                    shape: vec![vals.len()],
                    data: vals.clone(),
                });
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta: BTreeMap::new(),
            arrays: self.state_arrays(""),
        }
    }

    /// Overwrites parameters and statistics from arrays named
    /// `prefix + name`; every one must be present with a matching shape.
    pub fn load_state(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        if ckpt.config != self.config {
            return Err(Error::Config(format!(
                "checkpoint config {:?} does not match model config {:?}",
                ckpt.config, self.config
            )));
        }
        let index: BTreeMap<&str, &NamedArray> = ckpt.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let key = format!("{prefix}{name}");
            let a = index
                .get(key.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks array '{key}'")))?;
            if a.shape != shape {
                return Err(Error::Config(format!(
                    "array '{key}' has shape {:?}, model expects {shape:?}",
                    a.shape
                )));
            }
            Ok(a.data.clone())
        };
        for p in &mut self.store.params {
            let data = fetch(&p.name, p.value.shape())?;
            p.value = Tensor::new(p.value.shape().to_vec(), data)?;
            p.grad = None;
        }
        for (name, s) in &mut self.store.stats {
            let [m, v] = stats_names(name);
            s.mean = fetch(&m, &[s.mean.len()])?;
            s.var = fetch(&v, &[s.var.len()])?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Model::build(&ckpt.config, 0)?;
        m.load_state(ckpt, "")?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::build(&Variant::Width28.config(), 3).unwrap();
        m.params_mut().stats[0].1.mean[0] = 0.123456789;
        let bytes = m.to_checkpoint().to_bytes();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let m = Model::build(&ModelConfig::default().with_encoder_width(4), 0).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut ckpt = m.to_checkpoint();
        ckpt.arrays.pop();
        assert!(Model::from_checkpoint(&ckpt).is_err());
        let mut other = Model::build(&ModelConfig::default().with_encoder_width(5), 0).unwrap();
        assert!(matches!(other.load_state(&m.to_checkpoint(), ""), Err(Error::Config(_))));
    }
}
