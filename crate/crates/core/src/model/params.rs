use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, WaveError};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"WAVEKIT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, which is also the position in [`ParamStore::bind`]'s output.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).numel())
            .sum()
    }

    /// Puts every parameter on `tape`: trainable ones as gradient leaves
    /// when `grads` is set, everything else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, grads: bool) -> Vec<Var<'t>> {
        self.values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &tr)| {
                if grads && tr {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Serializes as `WAVEKIT1` followed by, per parameter: u32 name length,
    /// name bytes, u32 rank, rank × u64 dims, then the f64 values, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint into `(name, tensor)` entries in file order.
    pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| WaveError::format("checkpoint", "truncated header"))?;
        if &magic != MAGIC {
            return Err(WaveError::format("checkpoint", "bad magic"));
        }
        let mut entries = Vec::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| WaveError::format("checkpoint", "non-utf8 name"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(&mut r, 8)?.try_into().expect("8 bytes"));
                shape.push(d as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel.checked_mul(8).ok_or_else(|| {
                WaveError::format("checkpoint", format!("oversized tensor {name}"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| WaveError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| WaveError::io(path, e))
    }

    /// Overwrites values from a checkpoint. Names and shapes must match this
    /// store exactly.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(WaveError::format(
                "checkpoint",
                format!("{} entries, model has {}", entries.len(), self.len()),
            ));
        }
        for (name, t) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| WaveError::format("checkpoint", format!("unknown parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(WaveError::format(
                    "checkpoint",
                    format!("{name}: shape {:?}, expected {:?}", t.shape(), self.get(id).shape()),
                ));
            }
            *self.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| WaveError::io(path, e))?;
        self.load_values(Self::parse_bytes(&bytes)?)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(WaveError::format("checkpoint", "truncated entry"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}
