//! Token representations from exported LLM hidden states.
//!
//! The exporter feeds each token to the source model and writes the last-layer
//! hidden state at every position to a THSR file:
//!
//! ```text
//! "THSR" | u32 h | u64 record_count | { u32 token_id | u32 T | T·h f32 } *
//! ```
//!
//! all little-endian. Each record is pooled to one vector of width `h`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::Embeddings;
use crate::error::{Error, Result};

pub const THSR_MAGIC: &[u8; 4] = b"THSR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
    #[default]
    Last,
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "avg" | "mean" => Ok(PoolMode::Avg),
            "last" => Ok(PoolMode::Last),
            other => Err(Error::invalid(format!("unknown pooling mode {other:?} (expected max, avg or last)"))),
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Avg => "avg",
            PoolMode::Last => "last",
        })
    }
}

/// Per-position hidden states (`steps × width`, row-major) for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateRecord {
    pub token_id: u32,
    steps: usize,
    width: usize,
    states: Vec<f32>,
}

impl HiddenStateRecord {
    pub fn new(token_id: u32, steps: usize, width: usize, states: Vec<f32>) -> Result<Self> {
        if steps == 0 || width == 0 {
            return Err(Error::invalid(format!("token {token_id}: record needs T ≥ 1 and h ≥ 1")));
        }
        if states.len() != steps * width {
            return Err(Error::Dimension(format!(
                "token {token_id}: {} values for {steps}×{width} states",
                states.len()
            )));
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("token {token_id}: non-finite hidden state")));
        }
        Ok(Self {
            token_id,
            steps,
            width,
            states,
        })
    }

    pub fn from_rows(token_id: u32, rows: &[Vec<f32>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension(format!("token {token_id}: ragged hidden-state rows")));
        }
        Self::new(token_id, rows.len(), width, rows.concat())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn position(&self, t: usize) -> &[f32] {
        &self.states[t * self.width..(t + 1) * self.width]
    }
}

pub fn pool(record: &HiddenStateRecord, mode: PoolMode) -> Vec<f64> {
    let h = record.width;
    match mode {
        PoolMode::Last => record.position(record.steps - 1).iter().map(|&x| f64::from(x)).collect(),
        PoolMode::Max => {
            let mut out: Vec<f64> = record.position(0).iter().map(|&x| f64::from(x)).collect();
            for t in 1..record.steps {
                for (o, &x) in out.iter_mut().zip(record.position(t)) {
                    *o = o.max(f64::from(x));
                }
            }
            out
        }
        PoolMode::Avg => {
            let mut out = vec![0.0; h];
            for t in 0..record.steps {
                for (o, &x) in out.iter_mut().zip(record.position(t)) {
                    *o += f64::from(x);
                }
            }
            let n = record.steps as f64;
            out.iter_mut().for_each(|o| *o /= n);
            out
        }
    }
}

/// Stacks pooled records into a `vocab_size × h` matrix, row `t` from the
/// record of token `t`. Every token must appear exactly once.
pub fn build_embeddings(records: &[HiddenStateRecord], vocab_size: usize, mode: PoolMode) -> Result<Embeddings> {
    let h = records
        .first()
        .map(HiddenStateRecord::width)
        .ok_or_else(|| Error::Coverage("hidden-state file has no records".into()))?;
    let mut slot: Vec<Option<usize>> = vec![None; vocab_size];
    for (k, r) in records.iter().enumerate() {
        if r.width != h {
            return Err(Error::Dimension(format!(
                "token {} has width {}, expected {h}",
                r.token_id, r.width
            )));
        }
        let id = r.token_id as usize;
        if id >= vocab_size {
            return Err(Error::Coverage(format!("token id {id} outside vocabulary of size {vocab_size}")));
        }
        if slot[id].replace(k).is_some() {
            return Err(Error::Coverage(format!("token id {id} appears more than once")));
        }
    }
    if let Some(missing) = slot.iter().position(Option::is_none) {
        return Err(Error::Coverage(format!("no hidden states for token id {missing}")));
    }
    let rows: Vec<Vec<f64>> = slot
        .par_iter()
        .map(|k| pool(&records[k.expect("checked above")], mode))
        .collect();
    let data = rows.concat();
    Embeddings::new(vocab_size, h, data)
}

pub fn write_hidden_states_to<W: Write>(records: &[HiddenStateRecord], mut w: W) -> Result<()> {
    let h = records.first().map_or(0, HiddenStateRecord::width);
    if records.iter().any(|r| r.width != h) {
        return Err(Error::Dimension("records have differing widths".into()));
    }
    w.write_all(THSR_MAGIC)?;
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.token_id.to_le_bytes())?;
        w.write_all(&(r.steps as u32).to_le_bytes())?;
        let bytes: Vec<u8> = r.states.iter().flat_map(|x| x.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format("truncated THSR file"),
        _ => Error::RawIo(e),
    })
}

pub fn read_hidden_states_from<R: Read>(mut r: R, size_hint: Option<u64>) -> Result<Vec<HiddenStateRecord>> {
    let mut head = [0u8; 16];
    read_or_truncated(&mut r, &mut head)?;
    if &head[..4] != THSR_MAGIC {
        return Err(Error::format(format!("bad THSR magic {:?}", &head[..4])));
    }
    let h = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let budget = size_hint.unwrap_or(u64::MAX);
    if count.saturating_mul(8) > budget {
        return Err(Error::format(format!("THSR header claims {count} records, more than the file holds")));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut b4 = [0u8; 4];
    let mut buf = Vec::new();
    for _ in 0..count {
        read_or_truncated(&mut r, &mut b4)?;
        let token_id = u32::from_le_bytes(b4);
        read_or_truncated(&mut r, &mut b4)?;
        let steps = u32::from_le_bytes(b4) as usize;
        let n = steps.saturating_mul(h);
        if (n as u64).saturating_mul(4) > budget {
            return Err(Error::format(format!("token {token_id}: record larger than file")));
        }
        buf.resize(n * 4, 0);
        read_or_truncated(&mut r, &mut buf)?;
        let states = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(HiddenStateRecord::new(token_id, steps, h, states).map_err(|e| Error::format(e.to_string()))?);
    }
    Ok(records)
}

pub fn write_hidden_states(records: &[HiddenStateRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_hidden_states_to(records, BufWriter::new(file))
}

pub fn read_hidden_states(path: impl AsRef<Path>) -> Result<Vec<HiddenStateRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map(|m| m.len()).ok();
    read_hidden_states_from(BufReader::new(file), len)
}
