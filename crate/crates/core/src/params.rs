//! Named parameter storage shared by every layer of a model.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Optimized by the trainer; enters the tape as a gradient leaf.
    Trainable,
    /// Learned elsewhere and never updated; enters the tape as a constant.
    Frozen,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        let mut tensor = tensor;
        tensor.requires_grad = kind == ParamKind::Trainable;
        tensor.grad = None;
        self.entries.push(ParamEntry { name, tensor, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Turns every trainable entry into a frozen one.
    pub fn freeze(&mut self) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable {
                e.kind = ParamKind::Frozen;
                e.tensor.requires_grad = false;
                e.tensor.grad = None;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Overwrites the value of `id`, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.tensor.numel() != values.len() {
            return Err(Error::dim(format!(
                "parameter {} holds {} values, got {}",
                e.name,
                e.tensor.numel(),
                values.len()
            )));
        }
        e.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Copies values for every entry from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .iter()
                .find(|(n, _)| *n == e.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {}", e.name)))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name,
                    e.tensor.shape(),
                    src.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Stable FNV-1a digest over names, kinds and the exact bit patterns of
    /// every value. Used to prove that frozen parameters did not move.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            eat(&[e.kind as u8]);
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
