//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GGANCKPT"
//! version    u32      1
//! json_len   u64
//! json       json_len bytes of UTF-8 (CheckpointHeader)
//! count      u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (ndim x u64)
//!   values   product(dims) x f64
//! ```
//!
//! Model parameters are stored under their own names. Optimizer moments,
//! when present, follow as `opt.m.<name>` and `opt.v.<name>`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::TopologyFile;

pub const MAGIC: &[u8; 8] = b"GGANCKPT";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "opt.m.";
const MOMENT_V: &str = "opt.v.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub topology: TopologyFile,
    pub init_seed: u64,
    /// Training configuration and counters, owned by the training loop.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    /// Adam first and second moments, indexed like `params`.
    pub moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut arrays: Vec<(String, &[usize], &[f64])> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape(), t.values()))
            .collect();
        if let Some((m, v)) = &self.moments {
            if m.len() != self.params.len() || v.len() != self.params.len() {
                return Err(Error::State("optimizer moments do not match parameters".into()));
            }
            for (prefix, moments) in [(MOMENT_M, m), (MOMENT_V, v)] {
                for ((name, t), values) in self.params.iter().zip(moments) {
                    if values.len() != t.len() {
                        return Err(Error::State(format!("moment {prefix}{name} has wrong length")));
                    }
                    arrays.push((format!("{prefix}{name}"), t.shape(), values));
                }
            }
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, shape, values) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let json_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("array {name} overruns the file")))?;
            let raw = r.take(n * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(rest) = name.strip_prefix(MOMENT_M) {
                m.push((rest.to_string(), values));
            } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
                v.push((rest.to_string(), values));
            } else {
                named.push((name, Tensor::new(shape, values)?));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        let params = ModelParams::from_named(named, header.init_seed)
            .map_err(|e| Error::Format(e.to_string()))?;
        let moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            Some((order_moments(&params, m)?, order_moments(&params, v)?))
        };
        Ok(Self {
            header,
            params,
            moments,
        })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn order_moments(params: &ModelParams, arrays: Vec<(String, Vec<f64>)>) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; params.len()];
    for (name, values) in arrays {
        let i = params
            .index_of(&name)
            .ok_or_else(|| Error::Format(format!("moment for unknown parameter {name}")))?;
        if values.len() != params.tensor(i).len() {
            return Err(Error::Format(format!("moment for {name} has wrong length")));
        }
        out[i] = Some(values);
    }
    out.into_iter()
        .zip(params.names())
        .map(|(o, n)| o.ok_or_else(|| Error::Format(format!("missing moment for {n}"))))
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::init_params;
    use crate::skeleton::SkeletonTopology;

    fn sample() -> Checkpoint {
        let topo = SkeletonTopology::upper_body();
        let mut model = ModelConfig::for_joints(topo.joint_count());
        model.generator.audio_channels = vec![4, 4, 4];
        model.generator.enc_channels = vec![4, 4];
        model.generator.dec_channels = vec![4, 4];
        model.generator.depth = 2;
        model.discriminator.channels = vec![4];
        model.discriminator.strides = vec![2];
        let params = init_params(&model, 7).unwrap();
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.25; t.len()]).collect();
        let v: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![1e-300; t.len()]).collect();
        Checkpoint {
            header: CheckpointHeader {
                model,
                topology: topo.to_file_repr(),
                init_seed: 7,
                training: Some(serde_json::json!({"epoch": 3})),
            },
            params,
            moments: Some((m, v)),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.moments, ck.moments);
        assert_eq!(back.header.model, ck.header.model);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().params, ck.params);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        match Checkpoint::from_bytes(&bad) {
            Err(Error::Format(m)) => assert!(m.contains("version 9")),
            other => panic!("{other:?}"),
        }
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }
}
