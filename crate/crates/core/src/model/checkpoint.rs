//! Binary checkpoint format.
//!
//! ```text
//! "DXNT" | u32 version | u32 n_params | n_params entries | u32 n_state | n_state entries
//! entry: u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u32 dims | payload (LE)
//! ```
//!
//! dtype codes: 0 f32, 1 f64, 2 u8, 3 u64. The parameter section holds
//! exactly the learnable scalars; running batch-norm statistics
//! (`bn.<layer>.running_mean` / `running_var`), the network description
//! (`meta.config`, UTF-8 bytes) and any training state (`optim.*`,
//! `sched.*`, `train.*`) live in the state section.

use std::path::Path;

use super::{Model, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DXNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl EntryData {
    fn code(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U8(_) => 2,
            EntryData::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }
}

fn width(code: u8) -> Option<usize> {
    match code {
        0 => Some(4),
        1 => Some(8),
        2 => Some(1),
        3 => Some(8),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            ..Self::floats(name, t.data())
        }
    }

    pub fn floats<T: Scalar>(name: impl Into<String>, values: &[T]) -> Self {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => EntryData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data,
        }
    }

    pub fn u64s(name: impl Into<String>, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: EntryData::U64(values.to_vec()),
        }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Self {
            name: name.into(),
            shape: vec![text.len()],
            data: EntryData::U8(text.as_bytes().to_vec()),
        }
    }

    /// Float payload widened to `f64`.
    pub fn as_f64s(&self) -> Result<Vec<f64>> {
        match &self.data {
            EntryData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            EntryData::F64(v) => Ok(v.clone()),
            _ => Err(self.bad("expected floating point data")),
        }
    }

    pub fn as_u64s(&self) -> Result<&[u64]> {
        match &self.data {
            EntryData::U64(v) => Ok(v),
            _ => Err(self.bad("expected u64 data")),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            EntryData::U8(v) => std::str::from_utf8(v).map_err(|_| self.bad("invalid UTF-8")),
            _ => Err(self.bad("expected u8 data")),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let vals = self.as_f64s()?;
        Tensor::new(&self.shape, vals.into_iter().map(T::lit).collect())
            .map_err(|e| self.bad(&e.to_string()))
    }

    fn bad(&self, reason: &str) -> Error {
        Error::CheckpointEntry {
            entry: self.name.clone(),
            reason: reason.to_string(),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        let name = self.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| self.bad("name longer than 65535 bytes"))?;
        let rank = u8::try_from(self.shape.len()).map_err(|_| self.bad("rank above 255"))?;
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(self.bad("shape does not match payload length"));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(self.data.code());
        out.push(rank);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| self.bad("dimension above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            EntryData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EntryData::U8(v) => out.extend_from_slice(v),
            EntryData::U64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn entry(&mut self, index: usize, section: &str) -> Result<Entry> {
        let anon = |reason: &str| Error::CheckpointEntry {
            entry: format!("{section}[{index}]"),
            reason: reason.to_string(),
        };
        let name_len = self
            .take(2)
            .ok_or_else(|| anon("truncated before name length"))?;
        let name_len = u16::from_le_bytes(name_len.try_into().unwrap()) as usize;
        let name = self
            .take(name_len)
            .ok_or_else(|| anon("truncated inside name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| anon("name is not UTF-8"))?;
        let bad = |reason: String| Error::CheckpointEntry {
            entry: name.clone(),
            reason,
        };
        let header = self
            .take(2)
            .ok_or_else(|| bad("truncated before dtype/rank".into()))?;
        let (code, rank) = (header[0], header[1] as usize);
        let w = width(code).ok_or_else(|| bad(format!("unknown dtype code {code}")))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                self.u32()
                    .ok_or_else(|| bad("truncated inside dims".into()))? as usize,
            );
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("size overflow".into()))?;
        let need = count
            .checked_mul(w)
            .ok_or_else(|| bad("size overflow".into()))?;
        let have = self.bytes.len() - self.pos;
        let payload = self.take(need).ok_or_else(|| {
            bad(format!(
                "truncated payload: need {need} bytes, {have} remain"
            ))
        })?;
        let data = match code {
            0 => EntryData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => EntryData::F64(
                payload
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            2 => EntryData::U8(payload.to_vec()),
            _ => EntryData::U64(
                payload
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Entry { name, shape, data })
    }
}

/// Parameter and state sections of a saved model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Entry>,
    pub state: Vec<Entry>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for section in [&self.params, &self.state] {
            let n = u32::try_from(section.len())
                .map_err(|_| Error::Checkpoint("too many entries".into()))?;
            out.extend_from_slice(&n.to_le_bytes());
            for e in section {
                e.encode(&mut out)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint: bad magic".into()));
        }
        let version = r
            .u32()
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut sections = [Vec::new(), Vec::new()];
        for (s, label) in sections.iter_mut().zip(["params", "state"]) {
            let n = r
                .u32()
                .ok_or_else(|| Error::Checkpoint(format!("truncated before {label} count")))?;
            for i in 0..n as usize {
                s.push(r.entry(i, label)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after state section",
                bytes.len() - r.pos
            )));
        }
        let [params, state] = sections;
        Ok(Self { params, state })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn state_entry(&self, name: &str) -> Option<&Entry> {
        self.state.iter().find(|e| e.name == name)
    }

    /// Appends or replaces a state entry.
    pub fn put_state(&mut self, entry: Entry) {
        match self.state.iter_mut().find(|e| e.name == entry.name) {
            Some(e) => *e = entry,
            None => self.state.push(entry),
        }
    }

    /// Learnable scalars in the parameter section.
    pub fn param_scalars(&self) -> usize {
        self.params.iter().map(|e| e.data.len()).sum()
    }

    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let params = model
            .params
            .iter()
            .map(|(n, p)| Entry::tensor(n.clone(), &p.value))
            .collect();
        let mut state = vec![Entry::text("meta.config", &model.config.to_kv())];
        for (n, s) in &model.norms {
            if let (Some(m), Some(v)) = (&s.running_mean, &s.running_var) {
                state.push(Entry::floats(format!("bn.{n}.running_mean"), m));
                state.push(Entry::floats(format!("bn.{n}.running_var"), v));
            }
        }
        Self { params, state }
    }

    pub fn config(&self) -> Result<NetConfig> {
        let e = self
            .state_entry("meta.config")
            .ok_or_else(|| Error::Checkpoint("missing `meta.config` entry".into()))?;
        NetConfig::from_kv(e.as_text()?)
    }

    /// Rebuilds the model; every parameter must be present with its declared shape.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let config = self.config()?;
        let mut model = Model::skeleton(&config)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter entries, network declares {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for e in &self.params {
            let p = model
                .params
                .get_mut(&e.name)
                .ok_or_else(|| Error::CheckpointEntry {
                    entry: e.name.clone(),
                    reason: "not a parameter of this network".into(),
                })?;
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::CheckpointEntry {
                    entry: e.name.clone(),
                    reason: format!("shape {:?}, network expects {:?}", e.shape, p.value.shape()),
                });
            }
            p.value = e.to_tensor()?;
        }
        for (n, s) in model.norms.iter_mut() {
            let mean = self.state_entry(&format!("bn.{n}.running_mean"));
            let var = self.state_entry(&format!("bn.{n}.running_var"));
            match (mean, var) {
                (Some(m), Some(v)) => {
                    let conv = |e: &Entry| -> Result<Vec<T>> {
                        Ok(e.as_f64s()?.into_iter().map(T::lit).collect())
                    };
                    s.set_running(conv(m)?, conv(v)?)
                        .map_err(|err| Error::CheckpointEntry {
                            entry: format!("bn.{n}"),
                            reason: err.to_string(),
                        })?;
                }
                (None, None) => {
                    s.running_mean = None;
                    s.running_var = None;
                }
                _ => {
                    return Err(Error::CheckpointEntry {
                        entry: format!("bn.{n}"),
                        reason: "running mean and variance must be stored together".into(),
                    })
                }
            }
        }
        Ok(model)
    }
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read(path)?.to_model()
    }
}
