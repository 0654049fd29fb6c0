//! Lexicon evaluation by corpus conversion: each token of one tokenization is
//! replaced by its top-1 counterpart and the result is compared with the
//! other tokenization of the same text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::lexicon::{AlignmentLexicon, Direction};

/// Replaces every token with its top-1 lexicon candidate. Document structure
/// and lengths are preserved.
pub fn convert_corpus(stream: &TokenStream, lexicon: &AlignmentLexicon) -> Result<TokenStream> {
    let map = lexicon.top1_all();
    let docs = stream
        .docs()
        .par_iter()
        .map(|doc| {
            doc.iter()
                .map(|&t| {
                    map.get(t as usize)
                        .copied()
                        .ok_or_else(|| Error::Coverage(format!("token {t} has no lexicon entry")))
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    TokenStream::new(docs, lexicon.candidate_vocab_size() as u32)
}

/// Corpus-level BLEU-1 components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu1 {
    pub bleu1: f64,
    pub brevity_penalty: f64,
    pub unigram_precision: f64,
    pub candidate_tokens: u64,
    pub reference_tokens: u64,
}

fn clipped_matches(cand: &[u32], reference: &[u32]) -> u64 {
    let mut budget: HashMap<u32, u64> = HashMap::new();
    for &t in reference {
        *budget.entry(t).or_default() += 1;
    }
    let mut hits = 0;
    for t in cand {
        if let Some(b) = budget.get_mut(t) {
            if *b > 0 {
                *b -= 1;
                hits += 1;
            }
        }
    }
    hits
}

/// Clipped unigram precision summed over documents, times the brevity penalty
/// `exp(min(0, 1 − r/c))`.
pub fn bleu1(candidate: &TokenStream, reference: &TokenStream) -> Result<Bleu1> {
    if candidate.docs().len() != reference.docs().len() {
        return Err(Error::invalid(format!(
            "candidate has {} documents, reference {}",
            candidate.docs().len(),
            reference.docs().len()
        )));
    }
    let c = candidate.total_tokens();
    let r = reference.total_tokens();
    if c == 0 {
        return Err(Error::invalid("candidate corpus is empty"));
    }
    let hits: Vec<u64> = candidate
        .docs()
        .par_iter()
        .zip(reference.docs().par_iter())
        .map(|(a, b)| clipped_matches(a, b))
        .collect();
    let matched: u64 = hits.iter().sum();
    let precision = matched as f64 / c as f64;
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    Ok(Bleu1 {
        bleu1: bp * precision,
        brevity_penalty: bp,
        unigram_precision: precision,
        candidate_tokens: c,
        reference_tokens: r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub direction: Direction,
    pub bleu1: f64,
    pub brevity_penalty: f64,
    pub unigram_precision: f64,
    /// Mean document-embedding cosine between converted and original text.
    pub semantic_score: Option<f64>,
    pub documents: usize,
    pub candidate_tokens: u64,
    pub reference_tokens: u64,
}

impl ConversionReport {
    fn new(direction: Direction, b: Bleu1, documents: usize, semantic_score: Option<f64>) -> Self {
        Self {
            direction,
            bleu1: b.bleu1,
            brevity_penalty: b.brevity_penalty,
            unigram_precision: b.unigram_precision,
            semantic_score,
            documents,
            candidate_tokens: b.candidate_tokens,
            reference_tokens: b.reference_tokens,
        }
    }
}

/// One vector per line, whitespace-separated.
pub fn read_sentence_embeddings(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sentence_embeddings(&text)
}

/// Documents' (converted, original) sentence embeddings, read from a file
/// that interleaves them row by row.
pub type SentencePairs = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn read_sentence_pairs(path: impl AsRef<Path>) -> Result<SentencePairs> {
    let path = path.as_ref();
    let rows = read_sentence_embeddings(path)?;
    if !rows.len().is_multiple_of(2) {
        return Err(Error::format(format!("{}: odd number of embedding rows", path.display())));
    }
    Ok(rows.chunks(2).map(|c| (c[0].clone(), c[1].clone())).unzip())
}

pub fn parse_sentence_embeddings(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|e| Error::format(format!("line {}: {e}", n + 1))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    if let Some(w) = rows.first().map(Vec::len) {
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::format("sentence embeddings have inconsistent widths"));
        }
    }
    Ok(rows)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Mean over documents of `cos(a_i, b_i)`.
pub fn semantic_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} vs {} document embeddings", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("no document embeddings"));
    }
    let mut total = 0.0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("document {i}: embedding widths differ")));
        }
        total += cosine(x, y).ok_or_else(|| Error::Numerical(format!("document {i}: zero embedding vector")))?;
    }
    Ok(total / a.len() as f64)
}

/// Like [`semantic_similarity`] for a single file holding two rows per
/// document: the converted text, then the original.
pub fn semantic_similarity_interleaved(rows: &[Vec<f64>]) -> Result<f64> {
    if !rows.len().is_multiple_of(2) {
        return Err(Error::invalid("interleaved embedding file needs an even number of rows"));
    }
    let (a, b): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.chunks(2).map(|p| (p[0].clone(), p[1].clone())).unzip();
    semantic_similarity(&a, &b)
}

/// Document-embedding pairs (converted, original) for one direction.
pub type SemanticInput<'a> = (&'a [Vec<f64>], &'a [Vec<f64>]);

/// Converts in both directions and scores each against the other
/// tokenization: `t→s` maps the target stream onto the source vocabulary and
/// compares with the source stream, `s→t` the reverse.
pub fn evaluate_bidirectional(
    src: &TokenStream,
    tgt: &TokenStream,
    lex_t2s: &AlignmentLexicon,
    lex_s2t: &AlignmentLexicon,
    semantic: [Option<SemanticInput<'_>>; 2],
) -> Result<(ConversionReport, ConversionReport)> {
    if lex_t2s.direction() != Direction::TgtToSrc || lex_s2t.direction() != Direction::SrcToTgt {
        return Err(Error::invalid("lexicon directions do not match (expected t2s and s2t)"));
    }
    let [sem_t2s, sem_s2t] = semantic;
    let score = |s: Option<SemanticInput<'_>>| s.map(|(a, b)| semantic_similarity(a, b)).transpose();
    let t2s = bleu1(&convert_corpus(tgt, lex_t2s)?, src)?;
    let s2t = bleu1(&convert_corpus(src, lex_s2t)?, tgt)?;
    Ok((
        ConversionReport::new(Direction::TgtToSrc, t2s, src.docs().len(), score(sem_t2s)?),
        ConversionReport::new(Direction::SrcToTgt, s2t, tgt.docs().len(), score(sem_s2t)?),
    ))
}

/// Fraction of queries (optionally restricted by `mask`) whose top-1
/// candidate equals `truth[q]`.
pub fn top1_accuracy(lexicon: &AlignmentLexicon, truth: &[u32], mask: Option<&[bool]>) -> Result<f64> {
    if truth.len() != lexicon.query_vocab_size() {
        return Err(Error::Dimension(format!(
            "truth has {} entries for {} queries",
            truth.len(),
            lexicon.query_vocab_size()
        )));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (q, &t) in truth.iter().enumerate() {
        if mask.is_some_and(|m| !m[q]) {
            continue;
        }
        n += 1;
        hit += usize::from(lexicon.top1(q as u32) == Some(t));
    }
    if n == 0 {
        return Err(Error::invalid("no queries selected for accuracy"));
    }
    Ok(hit as f64 / n as f64)
}
