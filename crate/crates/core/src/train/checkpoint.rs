//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "THINCKP1"
//! manifest     u64 length, then that many bytes of UTF-8 JSON
//! tensors      u64 count, then per tensor:
//!                u32 name length, name bytes, u8 kind (0 trainable,
//!                1 frozen, 2 buffer), u32 rank, rank × u64 dims,
//!                product(dims) × f64
//! optimizer    u8 flag; if 1: u64 length, then JSON of the Adam state
//! ```
//!
//! Values are stored as raw `f64` bit patterns, so a reload is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::config::ExoTarget;
use crate::error::{Error, Result};
use crate::params::ParamKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"THINCKP1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub variant: String,
    pub dataset: String,
    pub seed: u64,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Set for pretrained exogenous networks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exo_target: Option<ExoTarget>,
    /// The full run configuration, when the checkpoint belongs to a run.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<Adam>,
}

fn kind_byte(k: ParamKind) -> u8 {
    match k {
        ParamKind::Trainable => 0,
        ParamKind::Frozen => 1,
        ParamKind::Buffer => 2,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::format("checkpoint", format!("length {n} too large")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let manifest = serde_json::to_vec(&self.manifest)?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(kind_byte(p.kind));
            out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                let js = serde_json::to_vec(a)?;
                out.extend_from_slice(&(js.len() as u64).to_le_bytes());
                out.extend_from_slice(&js);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let n = r.len()?;
        let manifest: Manifest = serde_json::from_slice(r.take(n)?)?;
        if manifest.version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("version {}, expected {VERSION}", manifest.version),
            ));
        }
        let count = r.len()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Frozen,
                2 => ParamKind::Buffer,
                k => return Err(Error::format("checkpoint", format!("{name}: kind byte {k}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mut tensor = Tensor::new(shape, data)?;
            tensor.requires_grad = kind == ParamKind::Trainable;
            params.push(NamedTensor { name, kind, tensor });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let n = r.len()?;
                Some(serde_json::from_slice(r.take(n)?)?)
            }
            f => return Err(Error::format("checkpoint", format!("optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// `(name, tensor)` pairs in the form `ParamStore::load_from` takes.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }
}
