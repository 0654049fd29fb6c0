//! Sparse symmetric token–token co-occurrence counts.
//!
//! Counting is done in exact integer arithmetic: with distance weighting each
//! pair at distance `d` contributes `L / d` units where `L = lcm(1..=window)`,
//! so a weight is always `n / L` for an integer `n`. Shards therefore merge
//! without rounding drift, and the result is bit-identical for any shard count.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::TokenStream;
use crate::error::{Error, Result};

pub const TCOC_MAGIC: &[u8; 4] = b"TCOC";
pub const DEFAULT_WINDOW: u32 = 10;
/// Largest supported window; keeps `lcm(1..=window)` small enough that counts
/// up to ~3e9 per entry stay exactly representable.
pub const MAX_WINDOW: u32 = 16;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `lcm(1..=window)`, the common denominator of all distance weights.
pub fn weight_denominator(window: u32) -> u64 {
    (1..=u64::from(window)).fold(1, |acc, d| acc / gcd(acc, d) * d)
}

/// Symmetric co-occurrence matrix stored as its upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurMatrix {
    vocab_size: u32,
    window: u32,
    /// `(i, j, weight)` with `i <= j`, sorted, weights > 0.
    entries: Vec<(u32, u32, f64)>,
}

impl CooccurMatrix {
    pub fn empty(vocab_size: u32, window: u32) -> Self {
        Self {
            vocab_size,
            window,
            entries: Vec::new(),
        }
    }

    /// Builds a matrix from arbitrary non-negative weights. Pairs are folded
    /// onto the upper triangle; a pair listed as both `(i, j)` and `(j, i)`
    /// must carry the same weight.
    pub fn from_entries(vocab_size: u32, window: u32, entries: impl IntoIterator<Item = (u32, u32, f64)>) -> Result<Self> {
        let mut map: HashMap<(u32, u32), f64> = HashMap::new();
        for (i, j, w) in entries {
            if i >= vocab_size || j >= vocab_size {
                return Err(Error::invalid(format!("entry ({i}, {j}) outside vocab size {vocab_size}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("entry ({i}, {j}) has invalid weight {w}")));
            }
            let key = (i.min(j), i.max(j));
            if let Some(prev) = map.insert(key, w) {
                if prev != w {
                    return Err(Error::invalid(format!(
                        "asymmetric weights for ({i}, {j}): {prev} vs {w}"
                    )));
                }
            }
        }
        let mut entries: Vec<_> = map.into_iter().filter(|&(_, w)| w > 0.0).map(|((i, j), w)| (i, j, w)).collect();
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        Ok(Self {
            vocab_size,
            window,
            entries,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Stored upper-triangle entries.
    pub fn upper_entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nnz_upper(&self) -> usize {
        self.entries.len()
    }

    pub fn weight(&self, i: u32, j: u32) -> f64 {
        let key = (i.min(j), i.max(j));
        self.entries
            .binary_search_by_key(&key, |&(a, b, _)| (a, b))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Every nonzero cell of the full symmetric matrix, each off-diagonal
    /// pair appearing in both orders.
    pub fn full_entries(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for &(i, j, w) in &self.entries {
            out.push((i, j, w));
            if i != j {
                out.push((j, i, w));
            }
        }
        out
    }

    /// Sum over the full symmetric matrix.
    pub fn total_weight(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, w)| if i == j { w } else { 2.0 * w })
            .sum()
    }

    /// Whether each token has at least one co-occurrence.
    pub fn coverage(&self) -> Vec<bool> {
        let mut covered = vec![false; self.vocab_size as usize];
        for &(i, j, _) in &self.entries {
            covered[i as usize] = true;
            covered[j as usize] = true;
        }
        covered
    }
}

fn validate_window(window: u32) -> Result<()> {
    if window == 0 || window > MAX_WINDOW {
        return Err(Error::invalid(format!("window must be in 1..={MAX_WINDOW}, got {window}")));
    }
    Ok(())
}

#[inline]
fn pair_key(a: u32, b: u32) -> u64 {
    let (i, j) = if a <= b { (a, b) } else { (b, a) };
    (u64::from(i) << 32) | u64::from(j)
}

fn count_docs(docs: &[Vec<u32>], window: u32, distance_weighting: bool) -> Result<Vec<(u64, u64)>> {
    let denom = weight_denominator(window);
    let units: Vec<u64> = (0..=u64::from(window))
        .map(|d| if d == 0 { 0 } else if distance_weighting { denom / d } else { denom })
        .collect();
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for doc in docs {
        for (pos, &a) in doc.iter().enumerate() {
            let end = (pos + window as usize + 1).min(doc.len());
            for (off, &b) in doc[pos + 1..end].iter().enumerate() {
                let mut add = units[off + 1];
                // (i, i) receives the contribution from both orders.
                if a == b {
                    add *= 2;
                }
                let slot = counts.entry(pair_key(a, b)).or_insert(0);
                *slot = slot
                    .checked_add(add)
                    .ok_or_else(|| Error::Numerical("co-occurrence count overflow".into()))?;
            }
        }
    }
    let mut out: Vec<(u64, u64)> = counts.into_iter().collect();
    out.sort_unstable_by_key(|&(k, _)| k);
    Ok(out)
}

fn from_counts(vocab_size: u32, window: u32, counts: Vec<(u64, u64)>) -> CooccurMatrix {
    let denom = weight_denominator(window) as f64;
    let entries = counts
        .into_iter()
        .map(|(k, n)| ((k >> 32) as u32, k as u32, n as f64 / denom))
        .collect();
    CooccurMatrix {
        vocab_size,
        window,
        entries,
    }
}

/// Counts co-occurrences over the whole stream, sharded across the rayon pool.
pub fn accumulate(stream: &TokenStream, window: u32, distance_weighting: bool) -> Result<CooccurMatrix> {
    accumulate_sharded(stream, window, distance_weighting, rayon::current_num_threads())
}

/// Counts each of `shards` document ranges independently, then merges in
/// shard order. The result does not depend on `shards`.
pub fn accumulate_sharded(stream: &TokenStream, window: u32, distance_weighting: bool, shards: usize) -> Result<CooccurMatrix> {
    validate_window(window)?;
    let ranges = stream.shard_ranges(shards);
    let parts = ranges
        .into_par_iter()
        .map(|r| {
            count_docs(&stream.docs()[r], window, distance_weighting)
                .map(|c| from_counts(stream.vocab_size(), window, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = parts.into_iter();
    let first = parts.next().unwrap_or_else(|| CooccurMatrix::empty(stream.vocab_size(), window));
    parts.try_fold(first, |acc, p| merge(&acc, &p))
}

/// Exact numerator of `w` over `denom`, when `w` was produced as `n / denom`.
fn lattice_numerator(w: f64, denom: f64) -> Option<u64> {
    let n = (w * denom).round();
    if (0.0..9.007_199_254_740_992e15).contains(&n) && n / denom == w {
        Some(n as u64)
    } else {
        None
    }
}

fn add_weights(a: f64, b: f64, denom: f64) -> f64 {
    match (lattice_numerator(a, denom), lattice_numerator(b, denom)) {
        (Some(x), Some(y)) => match x.checked_add(y) {
            Some(n) if n < (1u64 << 53) => n as f64 / denom,
            _ => a + b,
        },
        _ => a + b,
    }
}

/// Entrywise sum of two matrices over the same vocabulary and window.
pub fn merge(a: &CooccurMatrix, b: &CooccurMatrix) -> Result<CooccurMatrix> {
    if a.vocab_size != b.vocab_size || a.window != b.window {
        return Err(Error::invalid(format!(
            "cannot merge matrices with (vocab, window) = ({}, {}) and ({}, {})",
            a.vocab_size, a.window, b.vocab_size, b.window
        )));
    }
    let denom = weight_denominator(a.window) as f64;
    let mut out = Vec::with_capacity(a.entries.len().max(b.entries.len()));
    let (mut x, mut y) = (a.entries.iter().peekable(), b.entries.iter().peekable());
    loop {
        match (x.peek(), y.peek()) {
            (Some(&&(i, j, w)), Some(&&(k, l, v))) => match (i, j).cmp(&(k, l)) {
                std::cmp::Ordering::Less => {
                    out.push((i, j, w));
                    x.next();
                }
                std::cmp::Ordering::Greater => {
                    out.push((k, l, v));
                    y.next();
                }
                std::cmp::Ordering::Equal => {
                    out.push((i, j, add_weights(w, v, denom)));
                    x.next();
                    y.next();
                }
            },
            (Some(&&e), None) => {
                out.push(e);
                x.next();
            }
            (None, Some(&&e)) => {
                out.push(e);
                y.next();
            }
            (None, None) => break,
        }
    }
    Ok(CooccurMatrix {
        vocab_size: a.vocab_size,
        window: a.window,
        entries: out,
    })
}

pub fn write_cooccur_to<W: Write>(m: &CooccurMatrix, mut w: W) -> Result<()> {
    w.write_all(TCOC_MAGIC)?;
    w.write_all(&m.vocab_size.to_le_bytes())?;
    w.write_all(&m.window.to_le_bytes())?;
    w.write_all(&(m.entries.len() as u64).to_le_bytes())?;
    for &(i, j, x) in &m.entries {
        let mut rec = [0u8; 16];
        rec[..4].copy_from_slice(&i.to_le_bytes());
        rec[4..8].copy_from_slice(&j.to_le_bytes());
        rec[8..].copy_from_slice(&x.to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format("truncated TCOC file"),
        _ => Error::RawIo(e),
    })
}

pub fn read_cooccur_from<R: Read>(mut r: R, size_hint: Option<u64>) -> Result<CooccurMatrix> {
    let mut head = [0u8; 20];
    read_or_truncated(&mut r, &mut head)?;
    if &head[..4] != TCOC_MAGIC {
        return Err(Error::format(format!("bad TCOC magic {:?}", &head[..4])));
    }
    let vocab_size = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    let window = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
    if let Some(size) = size_hint {
        if count.saturating_mul(16).saturating_add(20) != size {
            return Err(Error::format(format!(
                "TCOC header declares {count} records but the file holds {} bytes",
                size
            )));
        }
    }
    let mut entries = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; 16];
    let mut prev: Option<(u32, u32)> = None;
    for _ in 0..count {
        read_or_truncated(&mut r, &mut rec)?;
        let i = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
        let j = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
        let x = f64::from_le_bytes(rec[8..].try_into().expect("8 bytes"));
        if i > j || j >= vocab_size {
            return Err(Error::format(format!("invalid TCOC record ({i}, {j})")));
        }
        if !x.is_finite() || x < 0.0 {
            return Err(Error::format(format!("invalid weight {x} at ({i}, {j})")));
        }
        if prev.is_some_and(|p| p >= (i, j)) {
            return Err(Error::format(format!("TCOC records not strictly sorted at ({i}, {j})")));
        }
        prev = Some((i, j));
        entries.push((i, j, x));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after TCOC records"));
    }
    Ok(CooccurMatrix {
        vocab_size,
        window,
        entries,
    })
}

pub fn write_cooccur(m: &CooccurMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cooccur_to(m, BufWriter::new(file))
}

pub fn read_cooccur(path: impl AsRef<Path>) -> Result<CooccurMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map(|m| m.len()).ok();
    read_cooccur_from(BufReader::new(file), len)
}
