//! Bilingual-lexicon-induction style token alignment.
//!
//! Both embedding spaces are normalized, mapped into a shared space by two
//! orthogonal matrices fitted with Procrustes, and the dictionary that drives
//! the fit is re-induced from mutual CSLS nearest neighbours until the mean
//! best similarity stops improving. Retrieval over the final mapping yields an
//! [`AlignmentLexicon`].

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::Embeddings;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorBundle};
use crate::vocab::SharedTokenSet;

pub use crate::lexicon::{AlignmentLexicon, Direction, LexiconRow};

/// Upper bound on the number of similarity cells materialized per block.
const BLOCK_CELLS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    #[default]
    Csls,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cos" => Ok(Similarity::Cosine),
            "csls" => Ok(Similarity::Csls),
            other => Err(Error::invalid(format!("unknown similarity {other:?} (expected cosine or csls)"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::Csls => "csls",
        })
    }
}

// ---------------------------------------------------------------------------
// normalization

/// Scales every nonzero row to unit length. Zero rows are returned as errors
/// only when they are flagged covered.
pub fn unit_rows(emb: &Embeddings) -> Result<Embeddings> {
    let mut out = emb.clone();
    let mut zero = Vec::new();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        } else if emb.is_covered(i) {
            zero.push(i);
        }
    }
    if !zero.is_empty() {
        let shown: Vec<String> = zero.iter().take(20).map(ToString::to_string).collect();
        return Err(Error::Numerical(format!(
            "{} covered rows have zero norm (ids {}{})",
            zero.len(),
            shown.join(", "),
            if zero.len() > 20 { ", …" } else { "" }
        )));
    }
    Ok(out)
}

/// Subtracts the column mean of the covered rows from every row.
pub fn center_columns(emb: &Embeddings) -> Embeddings {
    let d = emb.dim();
    let covered = emb.covered_indices();
    let mut mean = vec![0.0; d];
    for &i in &covered {
        for (m, x) in mean.iter_mut().zip(emb.row(i)) {
            *m += x;
        }
    }
    if !covered.is_empty() {
        let n = covered.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    let mut out = emb.clone();
    for i in 0..out.rows() {
        for (x, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    out
}

/// Unit length, mean centering, unit length.
pub fn normalize(emb: &Embeddings) -> Result<Embeddings> {
    let unit = unit_rows(emb)?;
    unit_rows(&center_columns(&unit))
}

// ---------------------------------------------------------------------------
// similarity primitives

fn row_normalized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

fn block_ranges(n: usize, other: usize) -> Vec<Range<usize>> {
    let step = (BLOCK_CELLS / other.max(1)).clamp(1, n.max(1));
    (0..n).step_by(step).map(|s| s..(s + step).min(n)).collect()
}

/// Mean of the `k` largest values. `scratch` is clobbered.
fn top_k_mean(scratch: &mut [f64], k: usize) -> f64 {
    let k = k.min(scratch.len());
    if k == 0 {
        return 0.0;
    }
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut scratch[..k];
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    top.iter().sum::<f64>() / k as f64
}

/// For each row `a_i` of `a`, the mean of its `k` largest dot products with
/// rows of `b`. Inputs are expected row-normalized, making these cosines.
pub fn knn_mean_similarity(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> Vec<f64> {
    block_ranges(a.nrows(), b.nrows())
        .into_par_iter()
        .flat_map_iter(|r| {
            let sims = b * a.rows(r.start, r.len()).transpose();
            let n = b.nrows();
            (0..r.len())
                .map(|c| {
                    let mut col = sims.as_slice()[c * n..(c + 1) * n].to_vec();
                    top_k_mean(&mut col, k)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// CSLS scores of one query `x` against every row of `candidates`:
/// `2·cos(x, y) − r_T(x) − r_S(y)`, where `r_T(x)` is the mean cosine of `x`
/// to its `k` nearest candidates and `r_S(y)` the mean cosine of `y` to its
/// `k` nearest rows of `queries`.
pub fn csls_score(x: &[f64], candidates: &DMatrix<f64>, queries: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    if x.len() != candidates.ncols() || x.len() != queries.ncols() {
        return Err(Error::Dimension("query and matrices differ in width".into()));
    }
    check_k(k, candidates.nrows(), queries.nrows())?;
    let xq = row_normalized(&DMatrix::from_row_slice(1, x.len(), x));
    let cands = row_normalized(candidates);
    let qs = row_normalized(queries);
    let cos: Vec<f64> = (&cands * xq.transpose()).iter().copied().collect();
    let r_t = top_k_mean(&mut cos.clone(), k);
    let r_s = knn_mean_similarity(&cands, &qs, k);
    Ok(cos.iter().zip(&r_s).map(|(c, rs)| 2.0 * c - r_t - rs).collect())
}

/// Full `queries × candidates` CSLS matrix.
pub fn csls_matrix(queries: &DMatrix<f64>, candidates: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if queries.ncols() != candidates.ncols() {
        return Err(Error::Dimension("query and candidate widths differ".into()));
    }
    check_k(k, candidates.nrows(), queries.nrows())?;
    let qs = row_normalized(queries);
    let cs = row_normalized(candidates);
    let r_t = knn_mean_similarity(&qs, &cs, k);
    let r_s = knn_mean_similarity(&cs, &qs, k);
    let mut out = &qs * cs.transpose();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] = 2.0 * out[(i, j)] - r_t[i] - r_s[j];
        }
    }
    Ok(out)
}

fn check_k(k: usize, n_candidates: usize, n_queries: usize) -> Result<()> {
    if k == 0 || k > n_candidates || k > n_queries {
        return Err(Error::invalid(format!(
            "CSLS neighbourhood k = {k} must be in 1..={}",
            n_candidates.min(n_queries)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Procrustes

/// Orthogonal `W` minimizing `‖Y·W − X‖_F` for row-paired `X`, `Y`:
/// `W = U·Vᵀ` from the SVD `YᵀX = U·Σ·Vᵀ`.
pub fn procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!("procrustes inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("procrustes input has non-finite entries".into()));
    }
    let m = y.transpose() * x;
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical("procrustes cross-covariance is all zero".into()));
    }
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed to produce U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed to produce Vᵀ".into()))?;
    Ok(u * v_t)
}

/// `‖WᵀW − I‖_F`.
pub fn orthogonality_error(w: &DMatrix<f64>) -> f64 {
    let n = w.ncols();
    (w.transpose() * w - DMatrix::<f64>::identity(n, n)).norm()
}

// ---------------------------------------------------------------------------
// self-learning

/// Orthogonal maps of both spaces into a shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingPair {
    pub w_src: DMatrix<f64>,
    pub w_tgt: DMatrix<f64>,
    /// Mean best cosine between the mapped induction sets, averaged over both
    /// directions.
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iter` was reached before the stopping rule fired.
    pub converged: bool,
    pub dictionary_size: usize,
}

impl MappingPair {
    pub fn identity(dim: usize) -> Self {
        Self {
            w_src: DMatrix::identity(dim, dim),
            w_tgt: DMatrix::identity(dim, dim),
            objective: f64::NAN,
            iterations: 0,
            converged: true,
            dictionary_size: 0,
        }
    }

    /// `W_src · W_tgtᵀ`, the single map taking source vectors to target space.
    pub fn composed(&self) -> DMatrix<f64> {
        &self.w_src * self.w_tgt.transpose()
    }

    /// `w_src` and `w_tgt` as row-major f32 tensors, with the fit summary
    /// in the metadata.
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut b = TensorBundle::new();
        for (name, w) in [("w_src", &self.w_src), ("w_tgt", &self.w_tgt)] {
            let data = w.transpose().iter().map(|&x| x as f32).collect();
            b.insert(name, Tensor::new(vec![w.nrows(), w.ncols()], data)?)?;
        }
        b.set_metadata("objective", self.objective.to_string());
        b.set_metadata("iterations", self.iterations.to_string());
        b.set_metadata("converged", self.converged.to_string());
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictionaryMode {
    /// Pairs that are each other's nearest neighbour.
    #[default]
    Mutual,
    /// Nearest neighbours from both directions.
    Union,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfLearnConfig {
    pub csls_k: usize,
    /// Initial probability of keeping a similarity cell during induction.
    pub keep_prob: f64,
    pub keep_prob_growth: f64,
    /// Rounds without an improvement of at least `tol` before the keep
    /// probability grows (or, once it is 1, before stopping).
    pub patience: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Build the first dictionary from similarity distributions when no
    /// seed pairs are available.
    pub unsupervised_init: bool,
    pub unsupervised_vocab: usize,
    /// Only the first `n` covered rows of each side take part in induction.
    pub induction_vocab: Option<usize>,
    pub dictionary: DictionaryMode,
}

impl Default for SelfLearnConfig {
    fn default() -> Self {
        Self {
            csls_k: 10,
            keep_prob: 0.1,
            keep_prob_growth: 2.0,
            patience: 50,
            tol: 1e-6,
            max_iter: 1000,
            seed: 0,
            unsupervised_init: false,
            unsupervised_vocab: 4000,
            induction_vocab: None,
            dictionary: DictionaryMode::Mutual,
        }
    }
}

impl SelfLearnConfig {
    fn validate(&self) -> Result<()> {
        if self.csls_k == 0 {
            return Err(Error::invalid("csls_k must be at least 1"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::invalid(format!("keep_prob must be in (0, 1], got {}", self.keep_prob)));
        }
        if self.keep_prob_growth.is_nan() || self.keep_prob_growth <= 1.0 {
            return Err(Error::invalid("keep_prob_growth must exceed 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

type Dictionary = Vec<(u32, u32)>;

fn induction_rows(emb: &Embeddings, limit: Option<usize>) -> Vec<usize> {
    let mut rows = emb.covered_indices();
    if let Some(n) = limit {
        rows.truncate(n);
    }
    rows
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows.iter())
}

/// Fits `(W_src, W_tgt)` maximizing agreement on `dict`:
/// `X_dᵀ Z_d = U Σ Vᵀ`, `W_src = U`, `W_tgt = V`.
fn fit_pair(src: &DMatrix<f64>, tgt: &DMatrix<f64>, dict: &[(u32, u32)]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dict.is_empty() {
        return Err(Error::Numerical("empty training dictionary".into()));
    }
    let s: Vec<usize> = dict.iter().map(|&(a, _)| a as usize).collect();
    let t: Vec<usize> = dict.iter().map(|&(_, b)| b as usize).collect();
    let m = gather_rows(src, &s).transpose() * gather_rows(tgt, &t);
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed to produce U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed to produce Vᵀ".into()))?;
    Ok((u, v_t.transpose()))
}

/// For each query row: index of the best candidate under
/// `cos − penalty/2` with dropout, and the best raw cosine.
fn nearest_neighbours(
    queries: &DMatrix<f64>,
    cands: &DMatrix<f64>,
    penalty: Option<&[f64]>,
    keep: f64,
    seed: u64,
    transposed: bool,
) -> (Vec<usize>, Vec<f64>) {
    let n = cands.nrows();
    let out: Vec<(usize, f64)> = block_ranges(queries.nrows(), n)
        .into_par_iter()
        .flat_map_iter(|r| {
            let sims = cands * queries.rows(r.start, r.len()).transpose();
            r.clone()
                .map(|q| {
                    let col = &sims.as_slice()[(q - r.start) * n..(q - r.start + 1) * n];
                    let best_raw = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    let mut fallback = (0usize, f64::NEG_INFINITY);
                    for (j, &c) in col.iter().enumerate() {
                        let score = c - penalty.map_or(0.0, |p| p[j] / 2.0);
                        if score > fallback.1 {
                            fallback = (j, score);
                        }
                        let (si, tj) = if transposed { (j, q) } else { (q, j) };
                        let kept = keep >= 1.0 || cell_uniform(seed, si, tj) < keep;
                        if kept && score > best.1 {
                            best = (j, score);
                        }
                    }
                    let pick = if best.0 == usize::MAX { fallback.0 } else { best.0 };
                    (pick, best_raw)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.into_iter().unzip()
}

/// Uniform draw in `[0, 1)` for similarity cell `(src, tgt)`: a SplitMix64
/// finalizer over the seed and cell coordinates, so both search directions
/// see the same dropout mask and the draw is independent of thread layout.
fn cell_uniform(seed: u64, src: usize, tgt: usize) -> f64 {
    let mut z = seed ^ (src as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tgt as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

struct Induction {
    dict: Dictionary,
    objective: f64,
}

#[allow(clippy::too_many_arguments)]
fn induce(
    xs: &DMatrix<f64>,
    zt: &DMatrix<f64>,
    s_rows: &[usize],
    t_rows: &[usize],
    k: usize,
    keep: f64,
    mode: DictionaryMode,
    seed: u64,
) -> Induction {
    let k_fwd = k.min(zt.nrows()).min(xs.nrows());
    let knn_tgt = knn_mean_similarity(zt, xs, k_fwd);
    let knn_src = knn_mean_similarity(xs, zt, k_fwd);
    let (fwd, best_fwd) = nearest_neighbours(xs, zt, Some(&knn_tgt), keep, seed, false);
    let (bwd, best_bwd) = nearest_neighbours(zt, xs, Some(&knn_src), keep, seed, true);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let objective = (mean(&best_fwd) + mean(&best_bwd)) / 2.0;
    let mut dict: Dictionary = match mode {
        DictionaryMode::Mutual => fwd
            .iter()
            .enumerate()
            .filter(|&(i, &j)| bwd[j] == i)
            .map(|(i, &j)| (s_rows[i] as u32, t_rows[j] as u32))
            .collect(),
        DictionaryMode::Union => fwd
            .iter()
            .enumerate()
            .map(|(i, &j)| (s_rows[i] as u32, t_rows[j] as u32))
            .chain(bwd.iter().enumerate().map(|(j, &i)| (s_rows[i] as u32, t_rows[j] as u32)))
            .collect(),
    };
    dict.sort_unstable();
    dict.dedup();
    Induction { dict, objective }
}

/// Initial dictionary from the sorted similarity distributions of each space,
/// which are invariant to rotations of either space.
fn unsupervised_dictionary(
    src: &DMatrix<f64>,
    tgt: &DMatrix<f64>,
    s_rows: &[usize],
    t_rows: &[usize],
    cfg: &SelfLearnConfig,
) -> Result<Dictionary> {
    let n = s_rows.len().min(t_rows.len()).min(cfg.unsupervised_vocab);
    if n == 0 {
        return Err(Error::invalid("no covered rows available for unsupervised initialization"));
    }
    let profile = |m: &DMatrix<f64>, rows: &[usize]| -> Result<DMatrix<f64>> {
        let x = gather_rows(m, &rows[..n]);
        let svd = x.svd(true, false);
        let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed to produce U".into()))?;
        let us = &u * DMatrix::from_diagonal(&svd.singular_values);
        let mut sim = us * u.transpose();
        for mut row in sim.row_iter_mut() {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_unstable_by(f64::total_cmp);
            row.iter_mut().zip(v).for_each(|(r, x)| *r = x);
        }
        let e = Embeddings::new(n, n, sim.transpose().as_slice().to_vec())?;
        normalize(&e).map(|e| e.to_matrix())
    };
    let xsim = profile(src, s_rows)?;
    let zsim = profile(tgt, t_rows)?;
    let induced = induce(&xsim, &zsim, &s_rows[..n], &t_rows[..n], cfg.csls_k, 1.0, DictionaryMode::Union, cfg.seed);
    Ok(induced.dict)
}

/// Learns orthogonal maps for both spaces by alternating Procrustes fits and
/// dictionary induction. Inputs should already be [`normalize`]d.
pub fn self_learn_align(
    src: &Embeddings,
    tgt: &Embeddings,
    seed_pairs: &SharedTokenSet,
    cfg: &SelfLearnConfig,
) -> Result<MappingPair> {
    cfg.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::Dimension(format!(
            "source dim {} differs from target dim {}",
            src.dim(),
            tgt.dim()
        )));
    }
    let xs_full = src.to_matrix();
    let zt_full = tgt.to_matrix();
    let s_rows = induction_rows(src, cfg.induction_vocab);
    let t_rows = induction_rows(tgt, cfg.induction_vocab);
    if s_rows.is_empty() || t_rows.is_empty() {
        return Err(Error::Coverage("no covered rows to align".into()));
    }
    let xs_ind = gather_rows(&xs_full, &s_rows);
    let zt_ind = gather_rows(&zt_full, &t_rows);

    let mut dict: Dictionary = seed_pairs
        .pairs
        .iter()
        .copied()
        .filter(|&(s, t)| {
            (s as usize) < src.rows() && (t as usize) < tgt.rows() && src.is_covered(s as usize) && tgt.is_covered(t as usize)
        })
        .collect();
    if dict.is_empty() {
        if !cfg.unsupervised_init {
            return Err(Error::invalid(
                "seed dictionary is empty and unsupervised initialization is disabled",
            ));
        }
        dict = unsupervised_dictionary(&xs_full, &zt_full, &s_rows, &t_rows, cfg)?;
        debug!("unsupervised initialization produced {} pairs", dict.len());
    }

    let mut keep = cfg.keep_prob;
    let mut best: Option<MappingPair> = None;
    let mut best_objective = f64::NEG_INFINITY;
    let mut last_improvement = 0usize;
    let mut converged = false;
    let mut it = 0usize;

    while it < cfg.max_iter {
        it += 1;
        let (ws, wt) = fit_pair(&xs_full, &zt_full, &dict)?;
        let xs = &xs_ind * &ws;
        let zt = &zt_ind * &wt;
        let round_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(it as u64);
        let induced = induce(&xs, &zt, &s_rows, &t_rows, cfg.csls_k, keep, cfg.dictionary, round_seed);
        if !induced.objective.is_finite() {
            return Err(Error::Numerical(format!("alignment objective became non-finite at iteration {it}")));
        }
        if induced.objective - best_objective >= cfg.tol {
            best_objective = induced.objective;
            last_improvement = it;
            best = Some(MappingPair {
                w_src: ws,
                w_tgt: wt,
                objective: induced.objective,
                iterations: it,
                converged: false,
                dictionary_size: dict.len(),
            });
        }
        debug!(
            "self-learning iteration {it}: keep {keep:.3}, dictionary {}, objective {:.6}",
            induced.dict.len(),
            induced.objective
        );
        let fixed_point = keep >= 1.0 && induced.dict == dict;
        if fixed_point {
            converged = true;
            break;
        }
        if it - last_improvement > cfg.patience {
            if keep >= 1.0 {
                converged = true;
                break;
            }
            keep = (keep * cfg.keep_prob_growth).min(1.0);
            last_improvement = it;
            // Resume from the best mapping rather than the last noisy round.
            if let Some(b) = &best {
                let xs = &xs_ind * &b.w_src;
                let zt = &zt_ind * &b.w_tgt;
                let round_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(it as u64) ^ 0xA5A5;
                let resumed = induce(&xs, &zt, &s_rows, &t_rows, cfg.csls_k, keep, cfg.dictionary, round_seed);
                if !resumed.dict.is_empty() {
                    dict = resumed.dict;
                    continue;
                }
            }
        }
        if !induced.dict.is_empty() {
            dict = induced.dict;
        }
    }

    let mut out = best.expect("at least one iteration ran");
    out.iterations = it;
    out.converged = converged;
    if !converged {
        warn!("self-learning stopped at max_iter = {} without converging", cfg.max_iter);
    }
    Ok(out)
}

/// One Procrustes fit on the seed pairs with no re-induction; the baseline
/// that self-learning improves on.
pub fn one_shot_align(src: &Embeddings, tgt: &Embeddings, seed_pairs: &SharedTokenSet, csls_k: usize) -> Result<MappingPair> {
    let xs_full = src.to_matrix();
    let zt_full = tgt.to_matrix();
    let (ws, wt) = fit_pair(&xs_full, &zt_full, &seed_pairs.pairs)?;
    let objective = mapping_objective(src, tgt, &ws, &wt, csls_k);
    Ok(MappingPair {
        w_src: ws,
        w_tgt: wt,
        objective,
        iterations: 1,
        converged: true,
        dictionary_size: seed_pairs.len(),
    })
}

/// The self-learning objective evaluated for a given mapping over all covered rows.
pub fn mapping_objective(src: &Embeddings, tgt: &Embeddings, ws: &DMatrix<f64>, wt: &DMatrix<f64>, csls_k: usize) -> f64 {
    let s_rows = induction_rows(src, None);
    let t_rows = induction_rows(tgt, None);
    let xs = gather_rows(&src.to_matrix(), &s_rows) * ws;
    let zt = gather_rows(&tgt.to_matrix(), &t_rows) * wt;
    induce(&xs, &zt, &s_rows, &t_rows, csls_k, 1.0, DictionaryMode::Mutual, 0).objective
}

// ---------------------------------------------------------------------------
// lexicon extraction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub direction: Direction,
    pub top_n: usize,
    pub similarity: Similarity,
    pub csls_k: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            direction: Direction::TgtToSrc,
            top_n: 3,
            similarity: Similarity::Csls,
            csls_k: 10,
        }
    }
}

/// Ranked top-`n` candidates per query row by `2·cos − r_query − r_cand`
/// (CSLS) or plain cosine; ties go to the lower candidate row index.
fn retrieve(
    queries: &DMatrix<f64>,
    cands: &DMatrix<f64>,
    query_rows: &[usize],
    r_query: Option<&[f64]>,
    r_cand: Option<&[f64]>,
    top_n: usize,
) -> Vec<Vec<(usize, f64)>> {
    let n = cands.nrows();
    let top_n = top_n.min(n);
    let sub = gather_rows(queries, query_rows);
    block_ranges(query_rows.len(), n)
        .into_par_iter()
        .flat_map_iter(|r| {
            let sims = cands * sub.rows(r.start, r.len()).transpose();
            r.clone()
                .map(|q| {
                    let col = &sims.as_slice()[(q - r.start) * n..(q - r.start + 1) * n];
                    let rq = r_query.map_or(0.0, |rq| rq[query_rows[q]]);
                    let mut scored: Vec<(usize, f64)> = col
                        .iter()
                        .enumerate()
                        .map(|(j, &c)| match r_cand {
                            Some(rc) => (j, 2.0 * c - rq - rc[j]),
                            None => (j, c),
                        })
                        .collect();
                    let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
                    if top_n < scored.len() {
                        scored.select_nth_unstable_by(top_n - 1, by_rank);
                        scored.truncate(top_n);
                    }
                    scored.sort_unstable_by(by_rank);
                    scored
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Builds the lexicon for `cfg.direction`. Shared tokens are paired directly
/// with their byte-identical counterpart; every other query token receives its
/// `top_n` candidates in the mapped space. Query rows without coverage are
/// ranked by cosine and marked low-confidence; uncovered candidate rows are
/// never proposed.
pub fn extract_lexicon(
    src: &Embeddings,
    tgt: &Embeddings,
    mapping: &MappingPair,
    shared: &SharedTokenSet,
    cfg: &ExtractConfig,
) -> Result<AlignmentLexicon> {
    if cfg.top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    if cfg.csls_k == 0 {
        return Err(Error::invalid("csls_k must be at least 1"));
    }
    let d = mapping.w_src.nrows();
    if src.dim() != d || tgt.dim() != d || mapping.w_tgt.nrows() != d {
        return Err(Error::Dimension(format!(
            "embedding dims ({}, {}) do not match the {d}-dimensional mapping",
            src.dim(),
            tgt.dim()
        )));
    }
    let xs = row_normalized(&(src.to_matrix() * &mapping.w_src));
    let zt = row_normalized(&(tgt.to_matrix() * &mapping.w_tgt));
    let (q_emb, c_emb, q_mat, c_mat, direct_pairs) = match cfg.direction {
        Direction::TgtToSrc => (tgt, src, &zt, &xs, shared.transposed().pairs),
        Direction::SrcToTgt => (src, tgt, &xs, &zt, shared.pairs.clone()),
    };

    let mut direct: Vec<Option<u32>> = vec![None; q_emb.rows()];
    for (q, c) in direct_pairs {
        if (q as usize) < direct.len() && (c as usize) < c_emb.rows() {
            direct[q as usize] = Some(c);
        }
    }

    let cand_rows = c_emb.covered_indices();
    if cand_rows.is_empty() {
        return Err(Error::Coverage("candidate side has no covered rows".into()));
    }
    let cands = gather_rows(c_mat, &cand_rows);
    let covered_queries = q_emb.covered_indices();

    let (r_query, r_cand) = match cfg.similarity {
        Similarity::Cosine => (None, None),
        Similarity::Csls => {
            let k = cfg.csls_k.min(cand_rows.len()).min(covered_queries.len().max(1));
            if k < cfg.csls_k {
                warn!("CSLS neighbourhood clamped from {} to {k}", cfg.csls_k);
            }
            let q_cov = gather_rows(q_mat, &covered_queries);
            let rq_cov = knn_mean_similarity(&q_cov, &cands, k);
            let mut rq = vec![0.0; q_emb.rows()];
            for (&i, v) in covered_queries.iter().zip(rq_cov) {
                rq[i] = v;
            }
            let rc = if covered_queries.is_empty() {
                vec![0.0; cands.nrows()]
            } else {
                knn_mean_similarity(&cands, &q_cov, k)
            };
            (Some(rq), Some(rc))
        }
    };

    let (covered_todo, uncovered_todo): (Vec<usize>, Vec<usize>) = (0..q_emb.rows())
        .filter(|&q| direct[q].is_none())
        .partition(|&q| q_emb.is_covered(q));

    let mut rows: Vec<Option<LexiconRow>> = direct
        .iter()
        .map(|d| d.map(LexiconRow::direct))
        .collect();
    let to_ids = |ranked: Vec<(usize, f64)>| -> Vec<(u32, f64)> {
        ranked.into_iter().map(|(j, s)| (cand_rows[j] as u32, s)).collect()
    };
    for (q, ranked) in covered_todo.iter().zip(retrieve(
        q_mat,
        &cands,
        &covered_todo,
        r_query.as_deref(),
        r_cand.as_deref(),
        cfg.top_n,
    )) {
        rows[*q] = Some(LexiconRow::ranked(to_ids(ranked), false));
    }
    for (q, ranked) in uncovered_todo
        .iter()
        .zip(retrieve(q_mat, &cands, &uncovered_todo, None, None, cfg.top_n))
    {
        rows[*q] = Some(LexiconRow::ranked(to_ids(ranked), true));
    }
    let rows = rows.into_iter().map(|r| r.expect("every query handled")).collect();
    AlignmentLexicon::new(cfg.direction, c_emb.rows(), rows)
}
