//! Parameter initialization for a new vocabulary.
//!
//! Every row-per-token tensor (`embedding`, and `lm_head` when present) is
//! rebuilt with one row per target token. Shared tokens copy their source
//! row bit for bit under every strategy; the remaining rows come from the
//! chosen [`InitKind`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{AlignmentLexicon, Direction};
use crate::tensor::{Tensor, TensorBundle};

/// Tensors with one row per vocabulary entry.
pub const VOCAB_TENSORS: [&str; 2] = ["embedding", "lm_head"];

/// Full covariance is used for `multivariate` up to this width; diagonal beyond.
pub const FULL_COVARIANCE_MAX_DIM: usize = 1024;

/// Standard deviation of `random_init` rows.
pub const RANDOM_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Top-1 source token from the lexicon.
    #[serde(rename = "tokalign")]
    TokAlign,
    RandomInit,
    RandomPermutation,
    Multivariate,
    Mean,
}

impl InitKind {
    pub fn is_stochastic(self) -> bool {
        matches!(self, InitKind::RandomInit | InitKind::RandomPermutation | InitKind::Multivariate)
    }

    pub const ALL: [InitKind; 5] = [
        InitKind::TokAlign,
        InitKind::RandomInit,
        InitKind::RandomPermutation,
        InitKind::Multivariate,
        InitKind::Mean,
    ];
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokalign" => Ok(InitKind::TokAlign),
            "random_init" | "random-init" => Ok(InitKind::RandomInit),
            "random_permutation" | "random-permutation" => Ok(InitKind::RandomPermutation),
            "multivariate" => Ok(InitKind::Multivariate),
            "mean" => Ok(InitKind::Mean),
            other => Err(Error::invalid(format!(
                "unknown init strategy {other:?} (expected tokalign, random_init, random_permutation, multivariate or mean)"
            ))),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::TokAlign => "tokalign",
            InitKind::RandomInit => "random_init",
            InitKind::RandomPermutation => "random_permutation",
            InitKind::Multivariate => "multivariate",
            InitKind::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub seed: Option<u64>,
}

impl InitStrategy {
    pub fn new(kind: InitKind, seed: Option<u64>) -> Result<Self> {
        if kind.is_stochastic() && seed.is_none() {
            return Err(Error::invalid(format!("strategy {kind} needs a seed")));
        }
        Ok(Self { kind, seed })
    }
}

/// Per-tensor source statistics needed by a fill strategy.
enum Filler<'a> {
    TopOne(&'a [u32]),
    Mean(Vec<f32>),
    Gaussian { mean: DVector<f64>, factor: DMatrix<f64> },
    Permutation,
    Random(Normal<f64>),
}

fn column_mean(src: &Tensor) -> Vec<f64> {
    let (rows, cols) = (src.shape()[0], src.shape()[1]);
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        for (m, &x) in mean.iter_mut().zip(src.row(r)) {
            *m += f64::from(x);
        }
    }
    if rows > 0 {
        mean.iter_mut().for_each(|m| *m /= rows as f64);
    }
    mean
}

/// Lower-triangular factor `L` with `L·Lᵀ ≈ Σ` (Cholesky of the empirical
/// covariance, or the diagonal of standard deviations for wide tensors).
fn covariance_factor(src: &Tensor, mean: &[f64]) -> Result<(DMatrix<f64>, bool)> {
    let (rows, cols) = (src.shape()[0], src.shape()[1]);
    let denom = rows.saturating_sub(1).max(1) as f64;
    if cols > FULL_COVARIANCE_MAX_DIM {
        let mut var = vec![0.0f64; cols];
        for r in 0..rows {
            for ((v, &x), m) in var.iter_mut().zip(src.row(r)).zip(mean) {
                let c = f64::from(x) - m;
                *v += c * c;
            }
        }
        let sd = DVector::from_iterator(cols, var.into_iter().map(|v| (v / denom).sqrt()));
        return Ok((DMatrix::from_diagonal(&sd), false));
    }
    let centered = DMatrix::from_fn(rows, cols, |r, c| f64::from(src.row(r)[c]) - mean[c]);
    let cov = centered.transpose() * &centered / denom;
    let scale = cov.diagonal().max().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut c = cov.clone();
        for i in 0..cols {
            c[(i, i)] += jitter;
        }
        if let Some(ch) = c.cholesky() {
            return Ok((ch.l(), true));
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 100.0 };
    }
    Err(Error::Numerical("source covariance is not positive definite".into()))
}

/// Stable per-tensor stream key so that `embedding` and `lm_head` draw
/// independent rows from one seed.
fn tensor_key(seed: u64, name: &str) -> u64 {
    name.bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn fill_row(filler: &Filler<'_>, src: &Tensor, row: usize, rng: Option<&mut ChaCha8Rng>, out: &mut [f32]) {
    match filler {
        Filler::TopOne(top) => out.copy_from_slice(src.row(top[row] as usize)),
        Filler::Mean(mean) => out.copy_from_slice(mean),
        Filler::Permutation => {
            let rng = rng.expect("stochastic strategy has an RNG");
            let pick = rng.random_range(0..src.shape()[0]);
            out.copy_from_slice(src.row(pick));
        }
        Filler::Random(normal) => {
            let rng = rng.expect("stochastic strategy has an RNG");
            out.iter_mut().for_each(|x| *x = normal.sample(rng) as f32);
        }
        Filler::Gaussian { mean, factor } => {
            let rng = rng.expect("stochastic strategy has an RNG");
            let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
            let draw = mean + factor * z;
            out.iter_mut().zip(draw.iter()).for_each(|(o, &v)| *o = v as f32);
        }
    }
}

/// Builds the target-vocabulary bundle from `src` using the `t→s` lexicon.
/// Tensors other than [`VOCAB_TENSORS`] are carried over unchanged.
pub fn remap_parameters(
    src: &TensorBundle,
    lexicon: &AlignmentLexicon,
    strategy: &InitStrategy,
    tgt_vocab_size: usize,
) -> Result<TensorBundle> {
    if lexicon.direction() != Direction::TgtToSrc {
        return Err(Error::invalid("remapping needs a target-to-source (t2s) lexicon"));
    }
    if strategy.kind.is_stochastic() && strategy.seed.is_none() {
        return Err(Error::invalid(format!("strategy {} needs a seed", strategy.kind)));
    }
    let covered = lexicon.query_vocab_size();
    if covered > tgt_vocab_size || (strategy.kind == InitKind::TokAlign && covered != tgt_vocab_size) {
        return Err(Error::Coverage(format!(
            "lexicon has {covered} query rows for a target vocabulary of {tgt_vocab_size}"
        )));
    }
    let direct: Vec<Option<u32>> = (0..tgt_vocab_size)
        .map(|t| lexicon.rows().get(t).filter(|r| r.direct).and_then(|r| r.top1()))
        .collect();
    let top1 = lexicon.top1_all();
    let n_filled = direct.iter().filter(|d| d.is_none()).count();

    let mut out = TensorBundle::new();
    for (k, v) in src.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    src.require("embedding")?;
    let mut full_cov: Option<bool> = None;
    for (name, tensor) in src.tensors() {
        if !VOCAB_TENSORS.contains(&name) {
            out.insert(name, tensor.clone())?;
            continue;
        }
        let (src_rows, width) = tensor.matrix_dims()?;
        if src_rows != lexicon.candidate_vocab_size() {
            return Err(Error::Dimension(format!(
                "tensor {name} has {src_rows} rows but the lexicon indexes {} source tokens",
                lexicon.candidate_vocab_size()
            )));
        }
        if src_rows == 0 && n_filled > 0 {
            return Err(Error::Dimension(format!("tensor {name} is empty")));
        }
        let filler = match strategy.kind {
            InitKind::TokAlign => Filler::TopOne(&top1),
            InitKind::Mean => Filler::Mean(column_mean(tensor).into_iter().map(|m| m as f32).collect()),
            InitKind::RandomPermutation => Filler::Permutation,
            InitKind::RandomInit => Filler::Random(Normal::new(0.0, RANDOM_INIT_STD).expect("valid std")),
            InitKind::Multivariate => {
                if n_filled == 0 {
                    Filler::Mean(Vec::new())
                } else {
                    let mean = column_mean(tensor);
                    let (factor, full) = covariance_factor(tensor, &mean)?;
                    full_cov = Some(full);
                    Filler::Gaussian {
                        mean: DVector::from_vec(mean),
                        factor,
                    }
                }
            }
        };
        let key = strategy.seed.map(|s| tensor_key(s, name));
        let mut data = vec![0.0f32; tgt_vocab_size * width];
        if width > 0 {
            data.par_chunks_mut(width).enumerate().for_each(|(t, row)| {
                if let Some(s) = direct[t] {
                    row.copy_from_slice(tensor.row(s as usize));
                    return;
                }
                let mut rng = key.map(|k| {
                    let mut g = ChaCha8Rng::seed_from_u64(k);
                    g.set_stream(t as u64);
                    g
                });
                fill_row(&filler, tensor, t, rng.as_mut(), row);
            });
        }
        out.insert(name, Tensor::new(vec![tgt_vocab_size, width], data)?)?;
    }
    if n_filled > 0 {
        out.set_metadata("init_strategy", strategy.kind.to_string());
        if let Some(s) = strategy.seed {
            out.set_metadata("init_seed", s.to_string());
        }
        if let Some(full) = full_cov {
            out.set_metadata("multivariate_covariance", if full { "full" } else { "diagonal" });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::LexiconRow;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn bundle(rows: usize, cols: usize) -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert("embedding", random_tensor(rows, cols, 1)).unwrap();
        b.insert("lm_head", random_tensor(rows, cols, 2)).unwrap();
        b.insert("norm.weight", random_tensor(1, cols, 3)).unwrap();
        b
    }

    /// Target tokens 0..shared are direct copies of source tokens shared..0
    /// (reversed); the rest map to source 0 by top-1.
    fn mixed_lexicon(src_size: usize, tgt_size: usize, shared: usize) -> AlignmentLexicon {
        let rows = (0..tgt_size)
            .map(|t| {
                if t < shared {
                    LexiconRow::direct((shared - 1 - t) as u32)
                } else {
                    LexiconRow::ranked(vec![((t % src_size) as u32, 0.5)], false)
                }
            })
            .collect();
        AlignmentLexicon::new(Direction::TgtToSrc, src_size, rows).unwrap()
    }

    fn strategies() -> Vec<InitStrategy> {
        InitKind::ALL.iter().map(|&k| InitStrategy::new(k, Some(9)).unwrap()).collect()
    }

    #[test]
    fn full_overlap_reproduces_input() {
        let b = bundle(10, 4);
        let lex = AlignmentLexicon::identity(10, Direction::TgtToSrc);
        for s in strategies() {
            assert_eq!(remap_parameters(&b, &lex, &s, 10).unwrap(), b, "{}", s.kind);
        }
    }

    #[test]
    fn shared_rows_are_bitwise_copies() {
        let b = bundle(20, 6);
        let lex = mixed_lexicon(20, 30, 7);
        for s in strategies() {
            let out = remap_parameters(&b, &lex, &s, 30).unwrap();
            for name in VOCAB_TENSORS {
                let (src, dst) = (b.get(name).unwrap(), out.get(name).unwrap());
                assert_eq!(dst.shape(), &[30, 6]);
                for t in 0..7 {
                    let a: Vec<u32> = dst.row(t).iter().map(|x| x.to_bits()).collect();
                    let e: Vec<u32> = src.row(6 - t).iter().map(|x| x.to_bits()).collect();
                    assert_eq!(a, e);
                }
            }
            assert_eq!(out.get("norm.weight"), b.get("norm.weight"));
        }
    }

    #[test]
    fn mean_rows_equal_column_mean() {
        let b = bundle(20, 5);
        let lex = mixed_lexicon(20, 12, 2);
        let out = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::Mean, None).unwrap(), 12).unwrap();
        let src = b.get("embedding").unwrap();
        for c in 0..5 {
            let mean: f64 = (0..20).map(|r| f64::from(src.row(r)[c])).sum::<f64>() / 20.0;
            for t in 2..12 {
                assert!((f64::from(out.get("embedding").unwrap().row(t)[c]) - mean).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn tokalign_copies_top1_and_handles_shrinkage() {
        let b = bundle(20, 3);
        let lex = mixed_lexicon(20, 8, 0);
        let out = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::TokAlign, None).unwrap(), 8).unwrap();
        let (src, dst) = (b.get("lm_head").unwrap(), out.get("lm_head").unwrap());
        assert_eq!(dst.shape(), &[8, 3]);
        for t in 0..8 {
            assert_eq!(dst.row(t), src.row(t));
        }
    }

    #[test]
    fn stochastic_strategies_are_deterministic() {
        let b = bundle(15, 4);
        let lex = mixed_lexicon(15, 40, 3);
        for s in strategies() {
            assert_eq!(remap_parameters(&b, &lex, &s, 40).unwrap(), remap_parameters(&b, &lex, &s, 40).unwrap());
        }
        let a = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::RandomInit, Some(1)).unwrap(), 40).unwrap();
        let c = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::RandomInit, Some(2)).unwrap(), 40).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn multivariate_sample_mean_within_three_sigma() {
        let (rows, d, n) = (400, 8, 4000);
        let mut b = TensorBundle::new();
        b.insert("embedding", random_tensor(rows, d, 5)).unwrap();
        let lex = mixed_lexicon(rows, n, 0);
        let out = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::Multivariate, Some(3)).unwrap(), n).unwrap();
        assert_eq!(out.metadata().get("multivariate_covariance").map(String::as_str), Some("full"));
        let src = b.get("embedding").unwrap();
        let dst = out.get("embedding").unwrap();
        for c in 0..d {
            let m: f64 = (0..rows).map(|r| f64::from(src.row(r)[c])).sum::<f64>() / rows as f64;
            let var: f64 = (0..rows).map(|r| (f64::from(src.row(r)[c]) - m).powi(2)).sum::<f64>() / (rows - 1) as f64;
            let drawn: f64 = (0..n).map(|r| f64::from(dst.row(r)[c])).sum::<f64>() / n as f64;
            assert!((drawn - m).abs() < 3.0 * var.sqrt() / (n as f64).sqrt(), "coord {c}");
        }
    }

    #[test]
    fn wide_tensors_use_diagonal_covariance() {
        let mut b = TensorBundle::new();
        b.insert("embedding", random_tensor(4, FULL_COVARIANCE_MAX_DIM + 1, 6)).unwrap();
        let lex = mixed_lexicon(4, 5, 0);
        let out = remap_parameters(&b, &lex, &InitStrategy::new(InitKind::Multivariate, Some(3)).unwrap(), 5).unwrap();
        assert_eq!(out.metadata().get("multivariate_covariance").map(String::as_str), Some("diagonal"));
    }

    #[test]
    fn argument_errors() {
        let b = bundle(5, 2);
        assert!(InitStrategy::new(InitKind::RandomInit, None).is_err());
        let tok = InitStrategy::new(InitKind::TokAlign, None).unwrap();
        assert!(remap_parameters(&b, &mixed_lexicon(5, 4, 0), &tok, 6).is_err());
        assert!(remap_parameters(&b, &mixed_lexicon(6, 4, 0), &tok, 4).is_err());
        let s2t = AlignmentLexicon::identity(5, Direction::SrcToTgt);
        assert!(remap_parameters(&b, &s2t, &tok, 5).is_err());
        let mut no_emb = TensorBundle::new();
        no_emb.insert("lm_head", random_tensor(5, 2, 1)).unwrap();
        assert!(remap_parameters(&no_emb, &AlignmentLexicon::identity(5, Direction::TgtToSrc), &tok, 5).is_err());
    }
}
