//! Sectioned little-endian checkpoint files.
//!
//! Layout: `LOOPCKPT`, a `u32`-length JSON header (model config, step
//! counter, stage), a `u32` tensor count, then per tensor a `u32`-length
//! UTF-8 name, a `u32` rank, `u64` dimensions and `f64` values. Names
//! prefixed `state.` carry optimizer state rather than parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LoopVla;
use crate::encoders::LoopConfig;
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const MAGIC: &[u8; 8] = b"LOOPCKPT";
const STATE_PREFIX: &str = "state.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: LoopConfig,
    step: u64,
    stage: u8,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LoopVla,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Last completed training stage; 0 for an untrained model.
    pub stage: u8,
    /// Named auxiliary tensors, such as optimizer moments.
    pub state: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn fresh(model: LoopVla) -> Self {
        Checkpoint {
            model,
            step: 0,
            stage: 0,
            state: Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.config.clone(),
            step: self.step,
            stage: self.stage,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let entries = self.model.store.entries();
        out.extend_from_slice(&((entries.len() + self.state.len()) as u32).to_le_bytes());
        let params = entries.iter().map(|e| (e.name.clone(), &e.value));
        let state = self.state.iter().map(|(n, a)| (format!("{STATE_PREFIX}{n}"), a));
        for (name, value) in params.chain(state) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let mut model = LoopVla::new(header.model, 0).map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
        let count = r.u32()? as usize;
        let mut seen = vec![false; model.store.len()];
        let mut state = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Array::from_vec(shape, data)?;
            if let Some(s) = name.strip_prefix(STATE_PREFIX) {
                state.push((s.to_string(), value));
                continue;
            }
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            model
                .store
                .set(id, value)
                .map_err(|e| Error::Checkpoint(format!("{e}")))?;
            seen[id] = true;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' missing",
                model.store.entry(id).name
            )));
        }
        Ok(Checkpoint {
            model,
            step: header.step,
            stage: header.stage,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn sample() -> Checkpoint {
        let model = LoopVla::new(LoopConfig::tiny(), 7).unwrap();
        Checkpoint {
            model,
            step: 42,
            stage: 1,
            state: vec![("adam.t".into(), Array::scalar(42.0))],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.model.store, c.model.store);
        assert_eq!(back.model.config, c.model.config);
        assert_eq!((back.step, back.stage), (42, 1));
        assert_eq!(back.state, c.state);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.store, c.model.store);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::decode(b"LOOP"), Err(Error::Checkpoint(_))));
    }
}
