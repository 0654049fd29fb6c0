//! Token-alignment toolkit for vocabulary adaptation.
//!
//! The pipeline learns a lexicon between two tokenizer vocabularies from
//! monolingual token statistics, evaluates it by corpus conversion, and uses
//! it to transplant embedding and LM-head rows to the new vocabulary:
//!
//! 1. [`corpus`] — token streams (built-in greedy tokenizer or `TITS` files);
//! 2. [`cooccur`] + [`glove`] — co-occurrence counts and GloVe vectors, or
//!    [`hidden`] — pooled hidden states exported from a model;
//! 3. [`align`] — normalization, Procrustes self-learning and CSLS retrieval
//!    producing an [`AlignmentLexicon`];
//! 4. [`metrics`] — BLEU-1 and semantic similarity of converted corpora;
//! 5. [`remap`] — parameter initialization for the target vocabulary;
//! 6. [`plan`] — two-stage tuning and distillation plans for an external trainer;
//! 7. [`pipeline`] — the configured end-to-end run with a hashed manifest.

pub mod align;
pub mod cooccur;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod glove;
pub mod hidden;
pub mod lexicon;
pub mod metrics;
pub mod pipeline;
pub mod plan;
pub mod remap;
pub mod synth;
pub mod tensor;
pub mod vocab;

pub use align::{extract_lexicon, normalize, procrustes, self_learn_align, ExtractConfig, MappingPair, SelfLearnConfig, Similarity};
pub use cooccur::{accumulate, merge, CooccurMatrix};
pub use corpus::{detokenize, longest_match_tokenize, GreedyTokenizer, TokenStream};
pub use embeddings::Embeddings;
pub use error::{Error, Result};
pub use glove::GloveConfig;
pub use hidden::{HiddenStateRecord, PoolMode};
pub use lexicon::{AlignmentLexicon, Direction, LexiconRow};
pub use metrics::{bleu1, convert_corpus, ConversionReport};
pub use plan::{AdaptationPlan, DistillConfig};
pub use remap::{remap_parameters, InitKind, InitStrategy};
pub use tensor::{Tensor, TensorBundle};
pub use vocab::{shared_tokens, SharedTokenSet, Vocab};
