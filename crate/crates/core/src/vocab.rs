//! Vocabulary tables, shared-token detection and compression statistics.
//!
//! Tokens are kept as raw byte strings. Vocabulary files store them with the
//! printable byte-to-unicode remapping used by byte-level BPE tokenizers
//! (`Ġ` for a space and so on), see [`bytes_to_unicode`].

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenStream;
use crate::error::{Error, Result};

/// The printable-character alphabet of byte-level BPE vocab files: byte `b`
/// maps to `table[b]`.
pub fn bytes_to_unicode() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| {
            (u32::from(b'!')..=u32::from(b'~')).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut shifted = 0u32;
        for b in 0..256u32 {
            let c = if printable(b) {
                b
            } else {
                shifted += 1;
                255 + shifted
            };
            table[b as usize] = char::from_u32(c).expect("valid scalar");
        }
        table
    })
}

fn unicode_to_bytes() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

/// Encodes a raw token into its vocab-file spelling.
pub fn encode_token(bytes: &[u8]) -> String {
    let table = bytes_to_unicode();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

/// Decodes a vocab-file spelling back into raw bytes.
///
/// Characters outside the byte alphabet (e.g. SentencePiece `▁` pieces in
/// vocabularies that are not byte-level) contribute their UTF-8 encoding.
pub fn decode_token(text: &str) -> Vec<u8> {
    let table = unicode_to_bytes();
    let mut out = Vec::with_capacity(text.len());
    for c in text.chars() {
        match table.get(&c) {
            Some(&b) => out.push(b),
            None => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out
}

/// Bidirectional token ↔ ID table for a single tokenizer.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    ids: HashMap<Vec<u8>, u32>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("size", &self.len()).finish()
    }
}

impl Vocab {
    /// Builds a vocabulary where token `i` gets ID `i`.
    pub fn from_tokens<I, T>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<Vec<u8>>,
    {
        let tokens: Vec<Vec<u8>> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() > u32::MAX as usize {
            return Err(Error::Vocab("vocabulary exceeds u32 id space".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(prev) = ids.insert(tok.clone(), id as u32) {
                return Err(Error::Vocab(format!(
                    "duplicate token {:?} (ids {prev} and {id})",
                    encode_token(tok)
                )));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// The 256 single-byte tokens, token `b` having ID `b`.
    pub fn byte_level() -> Self {
        Self::from_tokens((0..=255u8).map(|b| vec![b])).expect("bytes are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, token: &[u8]) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        self.tokens.iter().map(Vec::as_slice)
    }

    /// True when every single-byte token is present, which makes greedy
    /// tokenization total.
    pub fn has_byte_coverage(&self) -> bool {
        (0..=255u8).all(|b| self.ids.contains_key(&[b][..]))
    }

    pub fn max_token_len(&self) -> usize {
        self.tokens.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Parses the JSON vocabulary format: an object mapping token spelling to ID.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let entries: OrderedEntries = serde_json::from_str(json)
            .map_err(|e| Error::Vocab(format!("cannot parse vocabulary JSON: {e}")))?;
        let n = entries.0.len();
        let mut slots: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut seen_spelling: HashMap<&str, u64> = HashMap::with_capacity(n);
        for (spelling, id) in &entries.0 {
            if let Some(prev) = seen_spelling.insert(spelling.as_str(), *id) {
                return Err(Error::Vocab(format!(
                    "duplicate token {spelling:?} (ids {prev} and {id})"
                )));
            }
            let idx = usize::try_from(*id).ok().filter(|&i| i < n).ok_or_else(|| {
                Error::Vocab(format!(
                    "token {spelling:?} has id {id}; ids must be contiguous in 0..{n}"
                ))
            })?;
            if slots[idx].is_some() {
                return Err(Error::Vocab(format!("id {id} assigned to more than one token")));
            }
            slots[idx] = Some(decode_token(spelling));
        }
        // n entries with distinct in-range ids fill every slot.
        let tokens = slots.into_iter().map(|t| t.expect("slot filled"));
        Self::from_tokens(tokens)
    }

    /// Serializes to the JSON vocabulary format, one entry per line in ID order.
    pub fn to_json_string(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 16 + 4);
        out.push('{');
        for (id, tok) in self.tokens.iter().enumerate() {
            if id > 0 {
                out.push(',');
            }
            out.push_str("\n  ");
            out.push_str(&serde_json::to_string(&encode_token(tok)).expect("string serializes"));
            out.push_str(": ");
            out.push_str(&id.to_string());
        }
        out.push_str("\n}\n");
        out
    }
}

/// JSON object entries in file order, keeping duplicates so they can be reported.
struct OrderedEntries(Vec<(String, u64)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object mapping token strings to non-negative integer ids")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((key, value)) = map.next_entry::<String, serde_json::Value>()? {
                    let id = value.as_u64().ok_or_else(|| {
                        de::Error::custom(format!("id of {key:?} is not a non-negative integer: {value}"))
                    })?;
                    out.push((key, id));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Vocab::from_json_str(&text).map_err(|e| match e {
        Error::Vocab(msg) => Error::Vocab(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_vocab(vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vocab.to_json_string()).map_err(|e| Error::io(path, e))
}

/// Tokens whose byte strings appear in both vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedTokenSet {
    /// `(src_id, tgt_id)` sorted by source ID.
    pub pairs: Vec<(u32, u32)>,
    pub overlap_ratio_src: f64,
    pub overlap_ratio_tgt: f64,
}

impl SharedTokenSet {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            overlap_ratio_src: 0.0,
            overlap_ratio_tgt: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same set seen from the other side.
    pub fn transposed(&self) -> Self {
        let mut pairs: Vec<(u32, u32)> = self.pairs.iter().map(|&(s, t)| (t, s)).collect();
        pairs.sort_unstable();
        Self {
            pairs,
            overlap_ratio_src: self.overlap_ratio_tgt,
            overlap_ratio_tgt: self.overlap_ratio_src,
        }
    }
}

pub fn shared_tokens(src: &Vocab, tgt: &Vocab) -> SharedTokenSet {
    let pairs: Vec<(u32, u32)> = src
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(s, tok)| tgt.id_of(tok).map(|t| (s as u32, t)))
        .collect();
    let ratio = |n: usize| if n == 0 { 0.0 } else { pairs.len() as f64 / n as f64 };
    SharedTokenSet {
        overlap_ratio_src: ratio(src.len()),
        overlap_ratio_tgt: ratio(tgt.len()),
        pairs,
    }
}

/// Bytes-per-token statistics of one tokenization of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_bytes: u64,
    pub total_tokens: u64,
    /// `total_bytes / total_tokens`.
    pub rate: f64,
    /// Per-document rate; `None` for documents that produced no tokens.
    pub per_document: Vec<Option<f64>>,
}

/// Computes bytes per token for `stream`, which must be the tokenization of `docs`.
pub fn compression_rate<D: AsRef<[u8]>>(docs: &[D], stream: &TokenStream) -> Result<CompressionReport> {
    if docs.len() != stream.docs().len() {
        return Err(Error::invalid(format!(
            "corpus has {} documents but the tokenization has {}",
            docs.len(),
            stream.docs().len()
        )));
    }
    let total_tokens = stream.total_tokens();
    if total_tokens == 0 {
        return Err(Error::invalid("tokenization contains zero tokens"));
    }
    let total_bytes: u64 = docs.iter().map(|d| d.as_ref().len() as u64).sum();
    let per_document = docs
        .iter()
        .zip(stream.docs())
        .map(|(d, t)| (!t.is_empty()).then(|| d.as_ref().len() as f64 / t.len() as f64))
        .collect();
    Ok(CompressionReport {
        total_bytes,
        total_tokens,
        rate: total_bytes as f64 / total_tokens as f64,
        per_document,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_alphabet_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut seen: Vec<char> = table.to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(table[b'A' as usize], 'A');
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn token_spelling_round_trips_all_bytes() {
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(decode_token(&encode_token(&all)), all);
        assert_eq!(decode_token("Ġthe"), b" the");
    }

    #[test]
    fn minimal_vocab() {
        let v = Vocab::from_json_str(r#"{"a":0,"b":1}"#).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id_of(b"b"), Some(1));
        assert_eq!(v.token(0), Some(&b"a"[..]));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = Vocab::from_json_str(r#"{"a":0,"a":1}"#).unwrap_err();
        assert!(err.to_string().contains("duplicate token"), "{err}");
    }

    #[test]
    fn gaps_and_repeated_ids_rejected() {
        assert!(Vocab::from_json_str(r#"{"a":0,"b":2}"#).is_err());
        assert!(Vocab::from_json_str(r#"{"a":0,"b":0}"#).is_err());
        assert!(Vocab::from_json_str(r#"{"a":-1}"#).is_err());
        assert!(Vocab::from_json_str(r#"{"a":0.5}"#).is_err());
        assert!(Vocab::from_json_str(r#"["a"]"#).is_err());
    }

    #[test]
    fn spellings_colliding_after_decoding_rejected() {
        // "Ġ" decodes to a space, so both keys name the same byte string.
        let err = Vocab::from_json_str(r#"{"Ġ":0," ":1}"#).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn byte_level_vocab_round_trips_through_json() {
        let v = Vocab::byte_level();
        assert_eq!(v.len(), 256);
        assert_eq!(v.id_of(b"A"), Some(65));
        let back = Vocab::from_json_str(&v.to_json_string()).unwrap();
        assert_eq!(back, v);
        assert!(back.has_byte_coverage());
    }

    #[test]
    fn file_order_need_not_follow_ids() {
        let v = Vocab::from_json_str(r#"{"b":1,"a":0}"#).unwrap();
        assert_eq!(v.token(0), Some(&b"a"[..]));
    }

    #[test]
    fn shared_tokens_identity_and_disjoint() {
        let v = Vocab::from_tokens(["a", "b", "c"]).unwrap();
        let s = shared_tokens(&v, &v);
        assert_eq!(s.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(s.overlap_ratio_src, 1.0);
        assert_eq!(s.overlap_ratio_tgt, 1.0);

        let w = Vocab::from_tokens(["x", "y"]).unwrap();
        let d = shared_tokens(&v, &w);
        assert!(d.is_empty());
        assert_eq!(d.overlap_ratio_src, 0.0);
    }

    #[test]
    fn shared_tokens_ratios_use_each_side() {
        let src = Vocab::from_tokens(["a", "b", "c", "d"]).unwrap();
        let tgt = Vocab::from_tokens(["z", "b", "a"]).unwrap();
        let s = shared_tokens(&src, &tgt);
        assert_eq!(s.pairs, vec![(0, 2), (1, 1)]);
        assert_eq!(s.overlap_ratio_src, 0.5);
        assert!((s.overlap_ratio_tgt - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(shared_tokens(&tgt, &src), s.transposed());
    }

    #[test]
    fn compression_rate_quotient() {
        let docs = vec![vec![b'x'; 100]];
        let stream = TokenStream::new(vec![vec![0; 25]], 1).unwrap();
        let r = compression_rate(&docs, &stream).unwrap();
        assert_eq!(r.rate, 4.0);
        assert_eq!(r.per_document, vec![Some(4.0)]);
    }

    #[test]
    fn compression_rate_errors() {
        let docs = vec![b"".to_vec()];
        let stream = TokenStream::new(vec![vec![]], 1).unwrap();
        assert!(compression_rate(&docs, &stream).is_err());
        let two = vec![b"a".to_vec(), b"b".to_vec()];
        let one = TokenStream::new(vec![vec![0]], 1).unwrap();
        assert!(compression_rate(&two, &one).is_err());
    }
}
