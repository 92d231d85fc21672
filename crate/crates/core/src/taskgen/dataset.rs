//! Length-prefixed binary dataset container plus a JSON-lines mirror.
//!
//! Binary layout (all integers and reals little-endian):
//! `b"LOOPVLA1"`, `u32` record count, then per record a `u32` payload length
//! followed by the payload: `u32` instruction id, `u8` difficulty tag, `u32`
//! horizon `T`, `(T + 1) x 16` observation reals, `T x 3` action reals.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::env::{Action, WorldState, OBS_DIM};
use super::{Difficulty, Episode};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LOOPVLA1";

fn encode_episode(ep: &Episode, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&ep.instruction_id.to_le_bytes());
    out.push(ep.difficulty.tag());
    out.extend_from_slice(&(ep.horizon() as u32).to_le_bytes());
    for obs in &ep.observations {
        for v in obs.features() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for a in &ep.actions {
        for v in a.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let len = (out.len() - start - 4) as u32;
    out[start..start + 4].copy_from_slice(&len.to_le_bytes());
}

pub fn encode_dataset(episodes: &[Episode]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    for ep in episodes {
        encode_episode(ep, &mut out);
    }
    out
}

pub fn serialize_dataset(episodes: &[Episode], path: &Path) -> Result<()> {
    let bytes = encode_dataset(episodes);
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                record: self.record,
                offset: self.pos,
                reason: format!(
                    "truncated: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn fail(&self, offset: usize, reason: String) -> Error {
        Error::Parse {
            record: self.record,
            offset,
            reason,
        }
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Episode>> {
    let mut cur = Cursor { buf, pos: 0, record: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(cur.fail(0, "bad magic".into()));
    }
    let count = cur.u32("record count")? as usize;
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for record in 0..count {
        cur.record = record;
        let len = cur.u32("record length")? as usize;
        let body_start = cur.pos;
        let instruction_id = cur.u32("instruction id")?;
        let tag_offset = cur.pos;
        let tag = cur.u8("difficulty")?;
        let difficulty = Difficulty::from_tag(tag).ok_or_else(|| cur.fail(tag_offset, format!("unknown difficulty tag {tag}")))?;
        let horizon = cur.u32("horizon")? as usize;
        let expected = 9 + (horizon + 1) * OBS_DIM * 8 + horizon * 3 * 8;
        if len != expected {
            return Err(cur.fail(body_start - 4, format!("record length {len} does not match horizon {horizon} ({expected})")));
        }
        let obs = cur.f64s((horizon + 1) * OBS_DIM, "observations")?;
        let acts = cur.f64s(horizon * 3, "actions")?;
        let observations = obs
            .chunks_exact(OBS_DIM)
            .enumerate()
            .map(|(t, f)| WorldState::from_features(f, t as u32))
            .collect();
        let actions = acts.chunks_exact(3).map(Action::from_slice).collect();
        episodes.push(Episode {
            instruction_id,
            difficulty,
            observations,
            actions,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Parse {
            record: count,
            offset: cur.pos,
            reason: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }
    Ok(episodes)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Episode>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_dataset(&bytes)
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    magic: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    instruction_id: u32,
    difficulty: Difficulty,
    horizon: usize,
    observations: Vec<Vec<f64>>,
    actions: Vec<[f64; 3]>,
}

/// Writes the JSON-lines mirror: a header line, then one line per episode.
pub fn export_jsonl(episodes: &[Episode], path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let header = JsonHeader {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        count: episodes.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w).map_err(|e| Error::io(ctx(), e))?;
    for ep in episodes {
        let rec = JsonRecord {
            instruction_id: ep.instruction_id,
            difficulty: ep.difficulty,
            horizon: ep.horizon(),
            observations: ep.observations.iter().map(|o| o.features().to_vec()).collect(),
            actions: ep.actions.iter().map(|a| a.to_array()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn import_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();
    let mut offset = 0;
    let parse_err = |record, offset, reason: String| Error::Parse { record, offset, reason };
    let header: JsonHeader = match lines.next() {
        Some(line) => {
            let line = line.map_err(|e| Error::io("reading header", e))?;
            offset += line.len() + 1;
            serde_json::from_str(&line).map_err(|e| parse_err(0, 0, e.to_string()))?
        }
        None => return Err(parse_err(0, 0, "missing header".into())),
    };
    let mut episodes = Vec::with_capacity(header.count);
    for (record, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("reading record", e))?;
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(record, offset, e.to_string()))?;
        if rec.observations.len() != rec.horizon + 1 || rec.actions.len() != rec.horizon {
            return Err(parse_err(record, offset, "sequence lengths disagree with horizon".into()));
        }
        if rec.observations.iter().any(|o| o.len() != OBS_DIM) {
            return Err(parse_err(record, offset, "observation width".into()));
        }
        offset += line.len() + 1;
        episodes.push(Episode {
            instruction_id: rec.instruction_id,
            difficulty: rec.difficulty,
            observations: rec
                .observations
                .iter()
                .enumerate()
                .map(|(t, f)| WorldState::from_features(f, t as u32))
                .collect(),
            actions: rec.actions.iter().map(|a| Action::from_slice(a)).collect(),
        });
    }
    if episodes.len() != header.count {
        return Err(parse_err(episodes.len(), offset, format!("header promised {} records", header.count)));
    }
    Ok(episodes)
}
