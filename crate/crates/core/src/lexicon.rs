//! The alignment lexicon `M_{t→s}` / `M_{s→t}` and its on-disk forms.
//!
//! TSV layout: optional `#`-prefixed metadata lines, the column header
//! `query_id\tcandidate_id\trank\tscore\tdirect`, then one line per
//! (query, candidate) with 1-based ranks. Scores are written in shortest
//! round-trip form so that a read/write cycle reproduces the file byte for byte.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TSV_HEADER: &str = "query_id\tcandidate_id\trank\tscore\tdirect";

/// Which vocabulary supplies the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Direction {
    /// Target tokens look up source tokens (`M_{t→s}`), used for remapping.
    #[default]
    #[serde(rename = "t2s")]
    TgtToSrc,
    #[serde(rename = "s2t")]
    SrcToTgt,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::TgtToSrc => Direction::SrcToTgt,
            Direction::SrcToTgt => Direction::TgtToSrc,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2s" | "t->s" | "tgt-to-src" => Ok(Direction::TgtToSrc),
            "s2t" | "s->t" | "src-to-tgt" => Ok(Direction::SrcToTgt),
            other => Err(Error::invalid(format!("unknown direction {other:?} (expected t2s or s2t)"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::TgtToSrc => "t2s",
            Direction::SrcToTgt => "s2t",
        })
    }
}

/// Ranked candidates for one query token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconRow {
    /// `(candidate_id, score)`, best first.
    pub candidates: Vec<(u32, f64)>,
    /// The query is a shared token paired with its byte-identical counterpart.
    pub direct: bool,
    /// The query had no learned representation; ranking is by cosine only.
    #[serde(default)]
    pub low_confidence: bool,
}

impl LexiconRow {
    pub fn direct(candidate: u32) -> Self {
        Self {
            candidates: vec![(candidate, 1.0)],
            direct: true,
            low_confidence: false,
        }
    }

    pub fn ranked(candidates: Vec<(u32, f64)>, low_confidence: bool) -> Self {
        Self {
            candidates,
            direct: false,
            low_confidence,
        }
    }

    pub fn top1(&self) -> Option<u32> {
        self.candidates.first().map(|c| c.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLexicon {
    direction: Direction,
    candidate_vocab_size: usize,
    rows: Vec<LexiconRow>,
}

impl AlignmentLexicon {
    pub fn new(direction: Direction, candidate_vocab_size: usize, rows: Vec<LexiconRow>) -> Result<Self> {
        let lex = Self {
            direction,
            candidate_vocab_size,
            rows,
        };
        lex.validate()?;
        Ok(lex)
    }

    /// Every query paired with itself.
    pub fn identity(size: usize, direction: Direction) -> Self {
        Self {
            direction,
            candidate_vocab_size: size,
            rows: (0..size as u32).map(LexiconRow::direct).collect(),
        }
    }

    /// Lexicon whose query `q` maps to `targets[q]` with score 1.
    pub fn from_top1(direction: Direction, candidate_vocab_size: usize, targets: &[u32]) -> Result<Self> {
        let rows = targets.iter().map(|&c| LexiconRow::ranked(vec![(c, 1.0)], false)).collect();
        Self::new(direction, candidate_vocab_size, rows)
    }

    fn validate(&self) -> Result<()> {
        for (q, row) in self.rows.iter().enumerate() {
            if row.candidates.is_empty() {
                return Err(Error::Coverage(format!("query token {q} has no lexicon entry")));
            }
            if row.direct && row.candidates.len() != 1 {
                return Err(Error::format(format!("direct query {q} must have exactly one candidate")));
            }
            if let Some(&(c, _)) = row.candidates.iter().find(|c| c.0 as usize >= self.candidate_vocab_size) {
                return Err(Error::format(format!(
                    "query {q}: candidate {c} outside vocabulary of size {}",
                    self.candidate_vocab_size
                )));
            }
            if row.candidates.iter().any(|c| c.1.is_nan()) {
                return Err(Error::format(format!("query {q}: NaN score")));
            }
            if row.candidates.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::format(format!("query {q}: scores are not non-increasing")));
            }
        }
        Ok(())
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn query_vocab_size(&self) -> usize {
        self.rows.len()
    }

    pub fn candidate_vocab_size(&self) -> usize {
        self.candidate_vocab_size
    }

    pub fn rows(&self) -> &[LexiconRow] {
        &self.rows
    }

    pub fn top1(&self, query: u32) -> Option<u32> {
        self.rows.get(query as usize).and_then(LexiconRow::top1)
    }

    /// Top-1 candidate of every query, in query order.
    pub fn top1_all(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.candidates[0].0).collect()
    }

    pub fn direct_count(&self) -> usize {
        self.rows.iter().filter(|r| r.direct).count()
    }

    pub fn low_confidence_count(&self) -> usize {
        self.rows.iter().filter(|r| r.low_confidence).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# direction: {}", self.direction).expect("string write");
        writeln!(out, "# query_vocab_size: {}", self.rows.len()).expect("string write");
        writeln!(out, "# candidate_vocab_size: {}", self.candidate_vocab_size).expect("string write");
        let low: Vec<String> = (0..self.rows.len())
            .filter(|&q| self.rows[q].low_confidence)
            .map(|q| q.to_string())
            .collect();
        if !low.is_empty() {
            writeln!(out, "# low_confidence: {}", low.join(" ")).expect("string write");
        }
        out.push_str(TSV_HEADER);
        out.push('\n');
        for (q, row) in self.rows.iter().enumerate() {
            for (rank, (c, score)) in row.candidates.iter().enumerate() {
                writeln!(out, "{q}\t{c}\t{}\t{score}\t{}", rank + 1, u8::from(row.direct)).expect("string write");
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut direction = Direction::TgtToSrc;
        let mut query_size: Option<usize> = None;
        let mut cand_size: Option<usize> = None;
        let mut low: Vec<usize> = Vec::new();
        let mut lines = text.lines().enumerate();
        let mut saw_header = false;
        for (n, line) in lines.by_ref() {
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta
                    .split_once(':')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::format(format!("line {}: bad metadata line", n + 1)))?;
                let num = |v: &str| v.parse::<usize>().map_err(|_| Error::format(format!("line {}: bad {key}", n + 1)));
                match key {
                    "direction" => direction = value.parse().map_err(|_| Error::format(format!("line {}: bad direction", n + 1)))?,
                    "query_vocab_size" => query_size = Some(num(value)?),
                    "candidate_vocab_size" => cand_size = Some(num(value)?),
                    "low_confidence" => {
                        low = value.split_whitespace().map(num).collect::<Result<_>>()?;
                    }
                    _ => {}
                }
                continue;
            }
            if line.trim_end() != TSV_HEADER {
                return Err(Error::format(format!("line {}: expected lexicon header {TSV_HEADER:?}", n + 1)));
            }
            saw_header = true;
            break;
        }
        if !saw_header {
            return Err(Error::format("lexicon file has no header line"));
        }

        let mut rows: Vec<LexiconRow> = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(format!("line {}: {what}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let q: usize = f[0].parse().map_err(|_| bad("bad query_id"))?;
            let c: u32 = f[1].parse().map_err(|_| bad("bad candidate_id"))?;
            let rank: usize = f[2].parse().map_err(|_| bad("bad rank"))?;
            let score: f64 = f[3].parse().map_err(|_| bad("bad score"))?;
            let direct = match f[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("direct must be 0 or 1")),
            };
            if rank == 1 {
                if q != rows.len() {
                    return Err(bad(&format!("query {q} out of order (expected {})", rows.len())));
                }
                rows.push(LexiconRow {
                    candidates: vec![(c, score)],
                    direct,
                    low_confidence: false,
                });
            } else {
                let expected = rows.len();
                let row = rows
                    .last_mut()
                    .filter(|_| q + 1 == expected)
                    .ok_or_else(|| bad("rank > 1 without a preceding rank-1 row"))?;
                if row.candidates.len() + 1 != rank || row.direct != direct {
                    return Err(bad("ranks must be consecutive within a query"));
                }
                row.candidates.push((c, score));
            }
        }
        if let Some(n) = query_size {
            if n != rows.len() {
                return Err(Error::Coverage(format!(
                    "lexicon declares {n} query tokens but lists {}",
                    rows.len()
                )));
            }
        }
        for q in low {
            rows.get_mut(q)
                .ok_or_else(|| Error::format(format!("low_confidence id {q} out of range")))?
                .low_confidence = true;
        }
        let cand_size = match cand_size {
            Some(n) => n,
            None => rows
                .iter()
                .flat_map(|r| r.candidates.iter().map(|c| c.0 as usize + 1))
                .max()
                .unwrap_or(0),
        };
        Self::new(direction, cand_size, rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lexicon serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lex: Self = serde_json::from_str(text).map_err(|e| Error::format(format!("lexicon JSON: {e}")))?;
        lex.validate()?;
        Ok(lex)
    }

    /// Writes TSV, or JSON when the path ends in `.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = if is_json(path) { self.to_json() } else { self.to_tsv() };
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if is_json(path) {
            Self::from_json(&text)
        } else {
            Self::from_tsv(&text)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> AlignmentLexicon {
        AlignmentLexicon::new(
            Direction::TgtToSrc,
            5,
            vec![
                LexiconRow::direct(3),
                LexiconRow::ranked(vec![(4, 0.75), (0, 0.1), (2, -0.3333333333333333)], false),
                LexiconRow::ranked(vec![(1, 0.2)], true),
            ],
        )
        .unwrap()
    }

    #[test]
    fn tsv_round_trip_is_byte_identical() {
        let lex = sample();
        let first = lex.to_tsv();
        let back = AlignmentLexicon::from_tsv(&first).unwrap();
        assert_eq!(back, lex);
        assert_eq!(back.to_tsv(), first);
    }

    #[test]
    fn tsv_layout() {
        let tsv = sample().to_tsv();
        let body: Vec<&str> = tsv.lines().skip_while(|l| l.starts_with('#')).collect();
        assert_eq!(body[0], TSV_HEADER);
        assert_eq!(body[1], "0\t3\t1\t1\t1");
        assert_eq!(body[2], "1\t4\t1\t0.75\t0");
        assert_eq!(body[4], "1\t2\t3\t-0.3333333333333333\t0");
    }

    #[test]
    fn json_round_trip() {
        let lex = sample();
        assert_eq!(AlignmentLexicon::from_json(&lex.to_json()).unwrap(), lex);
    }

    #[test]
    fn rejects_unsorted_scores_and_gaps() {
        assert!(AlignmentLexicon::new(Direction::TgtToSrc, 3, vec![LexiconRow::ranked(vec![(0, 0.1), (1, 0.2)], false)]).is_err());
        let gap = format!("{TSV_HEADER}\n0\t1\t1\t0.5\t0\n2\t1\t1\t0.5\t0\n");
        assert!(AlignmentLexicon::from_tsv(&gap).is_err());
        let skip = format!("{TSV_HEADER}\n0\t1\t1\t0.5\t0\n0\t1\t3\t0.5\t0\n");
        assert!(AlignmentLexicon::from_tsv(&skip).is_err());
        assert!(AlignmentLexicon::from_tsv("no header\n").is_err());
    }

    #[test]
    fn declared_size_must_match() {
        let tsv = format!("# query_vocab_size: 3\n{TSV_HEADER}\n0\t1\t1\t0.5\t0\n");
        assert!(matches!(AlignmentLexicon::from_tsv(&tsv), Err(Error::Coverage(_))));
    }

    #[test]
    fn identity_lexicon() {
        let lex = AlignmentLexicon::identity(4, Direction::SrcToTgt);
        assert_eq!(lex.top1_all(), vec![0, 1, 2, 3]);
        assert_eq!(lex.direct_count(), 4);
    }

    proptest! {
        #[test]
        fn arbitrary_lexicons_round_trip(
            raw in prop::collection::vec(
                (prop::collection::vec((0u32..50, -1.0e6f64..1.0e6), 1..4), any::<bool>(), any::<bool>()),
                1..30,
            )
        ) {
            let rows: Vec<LexiconRow> = raw
                .into_iter()
                .map(|(mut cands, direct, low)| {
                    if direct {
                        LexiconRow::direct(cands[0].0)
                    } else {
                        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
                        LexiconRow::ranked(cands, low)
                    }
                })
                .collect();
            let lex = AlignmentLexicon::new(Direction::SrcToTgt, 50, rows).unwrap();
            let tsv = lex.to_tsv();
            let back = AlignmentLexicon::from_tsv(&tsv).unwrap();
            prop_assert_eq!(&back, &lex);
            prop_assert_eq!(back.to_tsv(), tsv);
        }
    }
}
