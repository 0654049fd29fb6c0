//! Seeded synthetic corpora with known ground truth.
//!
//! [`ZipfBigram`] is a first-order Markov source whose unigram mass follows a
//! Zipf law; [`PermutationBenchmark`] pairs one of its corpora with a
//! relabeled copy, giving two "tokenizations" whose true alignment is a known
//! permutation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenStream;
use crate::vocab::Vocab;

/// Zipf-weighted bigram language over `vocab_size` token IDs.
#[derive(Debug, Clone)]
pub struct ZipfBigram {
    vocab_size: usize,
    unigram: WeightedIndex<f64>,
    successors: Vec<Vec<u32>>,
    successor_dist: WeightedIndex<f64>,
    /// Probability of drawing the next token from the unigram instead of the
    /// current token's successor list.
    backoff: f64,
}

impl ZipfBigram {
    pub const SUCCESSORS: usize = 24;

    pub fn new(vocab_size: usize, seed: u64) -> Self {
        assert!(vocab_size >= 2, "need at least two tokens");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zipf: Vec<f64> = (0..vocab_size).map(|r| 1.0 / (r + 1) as f64).collect();
        let unigram = WeightedIndex::new(&zipf).expect("positive weights");
        let k = Self::SUCCESSORS.min(vocab_size);
        let successors = (0..vocab_size)
            .map(|_| {
                let mut picked: Vec<u32> = Vec::with_capacity(k);
                while picked.len() < k {
                    let c = unigram.sample(&mut rng) as u32;
                    if !picked.contains(&c) {
                        picked.push(c);
                    }
                }
                picked.shuffle(&mut rng);
                picked
            })
            .collect();
        let succ_w: Vec<f64> = (0..k).map(|r| 1.0 / (r + 1) as f64).collect();
        Self {
            vocab_size,
            unigram,
            successors,
            successor_dist: WeightedIndex::new(&succ_w).expect("positive weights"),
            backoff: 0.1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Samples `total_tokens` tokens split into documents of `doc_len`.
    pub fn generate(&self, total_tokens: usize, doc_len: usize, seed: u64) -> TokenStream {
        let doc_len = doc_len.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::with_capacity(total_tokens.div_ceil(doc_len));
        let mut remaining = total_tokens;
        while remaining > 0 {
            let n = remaining.min(doc_len);
            let mut doc = Vec::with_capacity(n);
            let mut cur = self.unigram.sample(&mut rng) as u32;
            doc.push(cur);
            while doc.len() < n {
                cur = if rng.random::<f64>() < self.backoff {
                    self.unigram.sample(&mut rng) as u32
                } else {
                    self.successors[cur as usize][self.successor_dist.sample(&mut rng)]
                };
                doc.push(cur);
            }
            docs.push(doc);
            remaining -= n;
        }
        TokenStream::new(docs, self.vocab_size as u32).expect("ids in range")
    }
}

/// Two tokenizations of one corpus related by a hidden relabeling.
#[derive(Debug, Clone)]
pub struct PermutationBenchmark {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub src_stream: TokenStream,
    pub tgt_stream: TokenStream,
    /// `permutation[s]` is the target ID of source token `s`.
    pub permutation: Vec<u32>,
}

impl PermutationBenchmark {
    /// Source tokens are spelled `s000…`; target spellings are disjoint, so
    /// no shared tokens exist.
    pub fn new(vocab_size: usize, total_tokens: usize, doc_len: usize, seed: u64) -> Self {
        let lang = ZipfBigram::new(vocab_size, seed);
        let src_stream = lang.generate(total_tokens, doc_len, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut permutation: Vec<u32> = (0..vocab_size as u32).collect();
        permutation.shuffle(&mut rng);
        let tgt_docs = src_stream
            .docs()
            .iter()
            .map(|d| d.iter().map(|&s| permutation[s as usize]).collect())
            .collect();
        let tgt_stream = TokenStream::new(tgt_docs, vocab_size as u32).expect("permutation stays in range");
        let width = vocab_size.to_string().len();
        let src_vocab = Vocab::from_tokens((0..vocab_size).map(|i| format!("s{i:0width$}"))).expect("unique");
        let tgt_vocab = Vocab::from_tokens((0..vocab_size).map(|i| format!("t{:08x}", disguise(i as u64, seed))))
            .expect("unique");
        Self {
            src_vocab,
            tgt_vocab,
            src_stream,
            tgt_stream,
            permutation,
        }
    }

    /// `inverse()[t]` is the source ID of target token `t`.
    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.permutation.len()];
        for (s, &t) in self.permutation.iter().enumerate() {
            inv[t as usize] = s as u32;
        }
        inv
    }
}

/// Injective scrambling of token indices (an odd multiplier is invertible mod 2^32).
fn disguise(i: u64, seed: u64) -> u32 {
    let mul = (seed as u32).wrapping_mul(2).wrapping_add(0x9E37_79B1) | 1;
    (i as u32).wrapping_mul(mul) ^ 0x5bd1_e995
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::shared_tokens;

    #[test]
    fn generation_is_seeded() {
        let lang = ZipfBigram::new(50, 1);
        assert_eq!(lang.generate(1000, 100, 2), lang.generate(1000, 100, 2));
        assert_ne!(lang.generate(1000, 100, 2), lang.generate(1000, 100, 3));
        let s = lang.generate(1050, 100, 2);
        assert_eq!(s.total_tokens(), 1050);
        assert_eq!(s.docs().len(), 11);
    }

    #[test]
    fn frequencies_are_head_heavy() {
        let s = ZipfBigram::new(200, 4).generate(100_000, 500, 5);
        let counts = s.token_counts();
        let head: u64 = counts[..20].iter().sum();
        let tail: u64 = counts[180..].iter().sum();
        assert!(head > 5 * tail, "head {head} tail {tail}");
    }

    #[test]
    fn benchmark_relabels_consistently() {
        let b = PermutationBenchmark::new(100, 5000, 250, 9);
        assert!(shared_tokens(&b.src_vocab, &b.tgt_vocab).is_empty());
        let inv = b.inverse();
        for (ds, dt) in b.src_stream.docs().iter().zip(b.tgt_stream.docs()) {
            for (&s, &t) in ds.iter().zip(dt) {
                assert_eq!(b.permutation[s as usize], t);
                assert_eq!(inv[t as usize], s);
            }
        }
    }
}
