//! Token-ID streams: the built-in greedy tokenizer, detokenization, and the
//! TITS binary container for pre-tokenized corpora.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::{encode_token, Vocab};

pub const TITS_MAGIC: &[u8; 4] = b"TITS";
pub const TITS_VERSION: u8 = 1;

/// A document-segmented sequence of token IDs over one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    docs: Vec<Vec<u32>>,
    vocab_size: u32,
    total_tokens: u64,
}

impl TokenStream {
    pub fn new(docs: Vec<Vec<u32>>, vocab_size: u32) -> Result<Self> {
        let mut total_tokens = 0u64;
        for (d, doc) in docs.iter().enumerate() {
            if let Some(&bad) = doc.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::format(format!(
                    "document {d} contains token id {bad} >= vocab size {vocab_size}"
                )));
            }
            total_tokens += doc.len() as u64;
        }
        Ok(Self {
            docs,
            vocab_size,
            total_tokens,
        })
    }

    pub fn docs(&self) -> &[Vec<u32>] {
        &self.docs
    }

    pub fn into_docs(self) -> Vec<Vec<u32>> {
        self.docs
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Occurrence count of every token ID.
    pub fn token_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab_size as usize];
        for &id in self.docs.iter().flatten() {
            counts[id as usize] += 1;
        }
        counts
    }

    /// Splits the documents into at most `n` contiguous ranges of roughly equal
    /// token mass. Used for sharded processing.
    pub fn shard_ranges(&self, n: usize) -> Vec<std::ops::Range<usize>> {
        let n = n.max(1);
        let target = self.total_tokens.div_ceil(n as u64).max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        let mut acc = 0u64;
        for (i, doc) in self.docs.iter().enumerate() {
            acc += doc.len() as u64;
            if acc >= target && out.len() + 1 < n {
                out.push(start..i + 1);
                start = i + 1;
                acc = 0;
            }
        }
        if start < self.docs.len() || out.is_empty() {
            out.push(start..self.docs.len());
        }
        out
    }
}

/// Greedy longest-prefix-match tokenizer over a vocabulary.
///
/// This is not BPE; it exists so that two vocabularies can produce genuinely
/// different segmentations of the same text without external tooling.
pub struct GreedyTokenizer {
    root: Box<[u32; 256]>,
    edges: HashMap<(u32, u8), u32>,
    terminal: Vec<Option<u32>>,
}

const NO_NODE: u32 = u32::MAX;

impl GreedyTokenizer {
    pub fn new(vocab: &Vocab) -> Self {
        let mut root = Box::new([NO_NODE; 256]);
        let mut edges = HashMap::new();
        // node 0 is the root
        let mut terminal: Vec<Option<u32>> = vec![None];
        for (id, tok) in vocab.tokens().enumerate() {
            let mut node = 0u32;
            for (depth, &b) in tok.iter().enumerate() {
                let next = if depth == 0 {
                    root[b as usize]
                } else {
                    edges.get(&(node, b)).copied().unwrap_or(NO_NODE)
                };
                node = if next == NO_NODE {
                    let fresh = terminal.len() as u32;
                    terminal.push(None);
                    if depth == 0 {
                        root[b as usize] = fresh;
                    } else {
                        edges.insert((node, b), fresh);
                    }
                    fresh
                } else {
                    next
                };
            }
            if !tok.is_empty() {
                terminal[node as usize] = Some(id as u32);
            }
        }
        Self {
            root,
            edges,
            terminal,
        }
    }

    pub fn tokenize(&self, text: &[u8]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        let mut pos = 0;
        while pos < text.len() {
            let mut node = self.root[text[pos] as usize];
            let mut best: Option<(u32, usize)> = None;
            let mut len = 1;
            while node != NO_NODE {
                if let Some(id) = self.terminal[node as usize] {
                    best = Some((id, len));
                }
                if pos + len >= text.len() {
                    break;
                }
                node = self
                    .edges
                    .get(&(node, text[pos + len]))
                    .copied()
                    .unwrap_or(NO_NODE);
                len += 1;
            }
            let (id, len) = best.ok_or_else(|| {
                Error::Vocab(format!(
                    "no token matches byte 0x{:02x} at offset {pos}",
                    text[pos]
                ))
            })?;
            out.push(id);
            pos += len;
        }
        Ok(out)
    }

    /// Tokenizes every document; output order follows input order.
    pub fn tokenize_corpus<D: AsRef<[u8]> + Sync>(&self, docs: &[D], vocab_size: u32) -> Result<TokenStream> {
        let docs = docs
            .par_iter()
            .map(|d| self.tokenize(d.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        TokenStream::new(docs, vocab_size)
    }
}

pub fn longest_match_tokenize(text: &[u8], vocab: &Vocab) -> Result<Vec<u32>> {
    GreedyTokenizer::new(vocab).tokenize(text)
}

pub fn detokenize(doc: &[u32], vocab: &Vocab) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for &id in doc {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary of size {}", vocab.len())))?;
        out.extend_from_slice(tok);
    }
    Ok(out)
}

/// Reads a text corpus with one document per line. The line terminator is not
/// part of the document.
pub fn read_text_corpus(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_documents(&bytes))
}

pub fn split_documents(bytes: &[u8]) -> Vec<Vec<u8>> {
    if bytes.is_empty() {
        return Vec::new();
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n').map(<[u8]>::to_vec).collect()
}

/// Writes one document per line.
pub fn write_text_corpus<D: AsRef<[u8]>>(docs: &[D], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        w.write_all(d.as_ref())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_token_stream_to<W: Write>(stream: &TokenStream, mut w: W) -> Result<()> {
    w.write_all(TITS_MAGIC)?;
    w.write_all(&[TITS_VERSION])?;
    w.write_all(&stream.vocab_size.to_le_bytes())?;
    w.write_all(&(stream.docs.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for doc in &stream.docs {
        w.write_all(&(doc.len() as u64).to_le_bytes())?;
        buf.clear();
        buf.extend(doc.iter().flat_map(|id| id.to_le_bytes()));
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated TITS payload while reading {what}")),
        _ => Error::RawIo(e),
    })
}

/// Reads a TITS stream. `size_hint` bounds allocations against corrupt headers.
pub fn read_token_stream_from<R: Read>(mut r: R, size_hint: Option<u64>) -> Result<TokenStream> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "magic")?;
    if &magic != TITS_MAGIC {
        return Err(Error::format(format!("bad TITS magic {magic:?}")));
    }
    let mut version = [0u8; 1];
    read_exact_or_truncated(&mut r, &mut version, "version")?;
    if version[0] != TITS_VERSION {
        return Err(Error::format(format!("unsupported TITS version {}", version[0])));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut b4, "vocab size")?;
    let vocab_size = u32::from_le_bytes(b4);
    read_exact_or_truncated(&mut r, &mut b8, "document count")?;
    let doc_count = u64::from_le_bytes(b8);
    let budget = size_hint.unwrap_or(u64::MAX);
    if doc_count.saturating_mul(8) > budget {
        return Err(Error::format(format!("TITS header claims {doc_count} documents, more than the file can hold")));
    }

    let mut docs = Vec::with_capacity(doc_count as usize);
    let mut bytes = Vec::new();
    for d in 0..doc_count {
        read_exact_or_truncated(&mut r, &mut b8, "document length")?;
        let len = u64::from_le_bytes(b8);
        if len.saturating_mul(4) > budget {
            return Err(Error::format(format!("document {d} length {len} exceeds file size")));
        }
        bytes.resize(len as usize * 4, 0);
        read_exact_or_truncated(&mut r, &mut bytes, "token ids")?;
        let doc: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(&bad) = doc.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::format(format!(
                "document {d} contains token id {bad} >= vocab size {vocab_size}"
            )));
        }
        docs.push(doc);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after TITS payload"));
    }
    TokenStream::new(docs, vocab_size)
}

pub fn write_token_stream(stream: &TokenStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_token_stream_to(stream, BufWriter::new(file))
}

pub fn read_token_stream(path: impl AsRef<Path>) -> Result<TokenStream> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map(|m| m.len()).ok();
    read_token_stream_from(BufReader::new(file), len)
}

/// Human-readable rendering of a tokenized document, for debugging.
pub fn render_tokens(doc: &[u32], vocab: &Vocab) -> String {
    doc.iter()
        .map(|&id| vocab.token(id).map(encode_token).unwrap_or_else(|| format!("<{id}>")))
        .collect::<Vec<_>>()
        .join(" ")
}
