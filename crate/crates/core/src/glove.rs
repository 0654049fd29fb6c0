//! GloVe training on a co-occurrence matrix.
//!
//! Objective over every nonzero cell `X_ij` of the symmetric matrix:
//!
//! ```text
//! J = Σ f(X_ij) · (w_i·w̃_j + b_i + b̃_j − ln X_ij)²,   f(x) = min(1, (x / x_max)^alpha)
//! ```
//!
//! optimized with per-parameter AdaGrad. The returned vector of token `i` is
//! `w_i + w̃_i`.

use std::sync::atomic::{AtomicU64, Ordering};

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooccur::CooccurMatrix;
use crate::embeddings::Embeddings;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GloveConfig {
    pub dim: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// 1 runs the deterministic single-worker trainer. More workers update
    /// shared parameters without synchronization and are not reproducible.
    pub threads: usize,
}

impl Default for GloveConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            x_max: 100.0,
            alpha: 0.75,
            learning_rate: 0.05,
            epochs: 15,
            seed: 7,
            threads: 1,
        }
    }
}

impl GloveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("glove dim must be at least 1"));
        }
        if self.x_max.is_nan() || self.x_max <= 0.0 {
            return Err(Error::invalid(format!("x_max must be positive, got {}", self.x_max)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }

    fn weight(&self, x: f64) -> f64 {
        if x < self.x_max {
            (x / self.x_max).powf(self.alpha)
        } else {
            1.0
        }
    }
}

/// Word vectors, context vectors and both bias vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub w_ctx: Vec<f64>,
    pub b: Vec<f64>,
    pub b_ctx: Vec<f64>,
}

impl GloveParams {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self {
            vocab_size,
            dim,
            w: vec![0.0; vocab_size * dim],
            w_ctx: vec![0.0; vocab_size * dim],
            b: vec![0.0; vocab_size],
            b_ctx: vec![0.0; vocab_size],
        }
    }

    /// Uniform `(-0.5, 0.5) / dim` initialization, as in the reference GloVe code.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / dim as f64;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| (rng.random::<f64>() - 0.5) * scale).collect() };
        let w = draw(vocab_size * dim);
        let w_ctx = draw(vocab_size * dim);
        let b = draw(vocab_size);
        let b_ctx = draw(vocab_size);
        Self {
            vocab_size,
            dim,
            w,
            w_ctx,
            b,
            b_ctx,
        }
    }

    fn check_shape(&self) -> Result<()> {
        let (v, d) = (self.vocab_size, self.dim);
        if self.w.len() != v * d || self.w_ctx.len() != v * d || self.b.len() != v || self.b_ctx.len() != v {
            return Err(Error::Dimension(format!(
                "parameter shapes do not match vocab {v} × dim {d}"
            )));
        }
        Ok(())
    }

    /// Parameters with the word and context roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            vocab_size: self.vocab_size,
            dim: self.dim,
            w: self.w_ctx.clone(),
            w_ctx: self.w.clone(),
            b: self.b_ctx.clone(),
            b_ctx: self.b.clone(),
        }
    }

    /// All values flattened as `w, w_ctx, b, b_ctx`.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w[..], &self.w_ctx, &self.b, &self.b_ctx].concat()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Loss and its analytic gradient at `params`.
pub fn loss_and_grad(m: &CooccurMatrix, params: &GloveParams, cfg: &GloveConfig) -> Result<(f64, GloveParams)> {
    params.check_shape()?;
    if params.vocab_size != m.vocab_size() as usize {
        return Err(Error::Dimension(format!(
            "parameters cover {} tokens but the matrix has {}",
            params.vocab_size,
            m.vocab_size()
        )));
    }
    let d = params.dim;
    let mut grad = GloveParams::zeros(params.vocab_size, d);
    let mut loss = 0.0;
    for (i, j, x) in m.full_entries() {
        let (i, j) = (i as usize, j as usize);
        let wi = &params.w[i * d..(i + 1) * d];
        let wj = &params.w_ctx[j * d..(j + 1) * d];
        let diff = dot(wi, wj) + params.b[i] + params.b_ctx[j] - x.ln();
        let f = cfg.weight(x);
        loss += f * diff * diff;
        let g = 2.0 * f * diff;
        for k in 0..d {
            grad.w[i * d + k] += g * wj[k];
            grad.w_ctx[j * d + k] += g * wi[k];
        }
        grad.b[i] += g;
        grad.b_ctx[j] += g;
    }
    Ok((loss, grad))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared parameter storage for the trainer. Relaxed atomics let worker
/// threads update rows concurrently without locks; with one worker they
/// behave like plain memory.
struct SharedVec(Vec<AtomicU64>);

impl SharedVec {
    fn from(v: &[f64]) -> Self {
        Self(v.iter().map(|x| AtomicU64::new(x.to_bits())).collect())
    }

    #[inline]
    fn get(&self, i: usize) -> f64 {
        f64::from_bits(self.0[i].load(Ordering::Relaxed))
    }

    #[inline]
    fn set(&self, i: usize, v: f64) {
        self.0[i].store(v.to_bits(), Ordering::Relaxed)
    }

    fn to_vec(&self) -> Vec<f64> {
        (0..self.0.len()).map(|i| self.get(i)).collect()
    }
}

struct SharedState {
    dim: usize,
    w: SharedVec,
    w_ctx: SharedVec,
    b: SharedVec,
    b_ctx: SharedVec,
    // AdaGrad accumulators
    gw: SharedVec,
    gw_ctx: SharedVec,
    gb: SharedVec,
    gb_ctx: SharedVec,
}

impl SharedState {
    fn new(p: &GloveParams) -> Self {
        let ones = |n: usize| SharedVec::from(&vec![1.0; n]);
        Self {
            dim: p.dim,
            w: SharedVec::from(&p.w),
            w_ctx: SharedVec::from(&p.w_ctx),
            b: SharedVec::from(&p.b),
            b_ctx: SharedVec::from(&p.b_ctx),
            gw: ones(p.w.len()),
            gw_ctx: ones(p.w_ctx.len()),
            gb: ones(p.b.len()),
            gb_ctx: ones(p.b_ctx.len()),
        }
    }

    fn params(&self, vocab_size: usize) -> GloveParams {
        GloveParams {
            vocab_size,
            dim: self.dim,
            w: self.w.to_vec(),
            w_ctx: self.w_ctx.to_vec(),
            b: self.b.to_vec(),
            b_ctx: self.b_ctx.to_vec(),
        }
    }

    /// One AdaGrad pass over `entries`; returns the summed weighted loss.
    fn run(&self, entries: &[(u32, u32, f64)], cfg: &GloveConfig) -> f64 {
        let d = self.dim;
        let mut wi = vec![0.0; d];
        let mut wj = vec![0.0; d];
        let mut cost = 0.0;
        for &(i, j, x) in entries {
            let (oi, oj) = (i as usize * d, j as usize * d);
            for k in 0..d {
                wi[k] = self.w.get(oi + k);
                wj[k] = self.w_ctx.get(oj + k);
            }
            let diff = dot(&wi, &wj) + self.b.get(i as usize) + self.b_ctx.get(j as usize) - x.ln();
            let fdiff = cfg.weight(x) * diff;
            cost += fdiff * diff;
            let lr = cfg.learning_rate;
            for k in 0..d {
                let g1 = fdiff * wj[k];
                let g2 = fdiff * wi[k];
                let s1 = self.gw.get(oi + k);
                let s2 = self.gw_ctx.get(oj + k);
                self.w.set(oi + k, wi[k] - lr * g1 / s1.sqrt());
                self.w_ctx.set(oj + k, wj[k] - lr * g2 / s2.sqrt());
                self.gw.set(oi + k, s1 + g1 * g1);
                self.gw_ctx.set(oj + k, s2 + g2 * g2);
            }
            let (i, j) = (i as usize, j as usize);
            let sb1 = self.gb.get(i);
            let sb2 = self.gb_ctx.get(j);
            self.b.set(i, self.b.get(i) - lr * fdiff / sb1.sqrt());
            self.b_ctx.set(j, self.b_ctx.get(j) - lr * fdiff / sb2.sqrt());
            self.gb.set(i, sb1 + fdiff * fdiff);
            self.gb_ctx.set(j, sb2 + fdiff * fdiff);
        }
        cost
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct GloveRun {
    pub embeddings: Embeddings,
    pub params: GloveParams,
    /// Mean weighted squared error over all cells, per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(m: &CooccurMatrix, cfg: &GloveConfig) -> Result<Embeddings> {
    train_from(m, cfg, None).map(|r| r.embeddings)
}

/// Trains starting from `init` (or a seeded random initialization).
pub fn train_from(m: &CooccurMatrix, cfg: &GloveConfig, init: Option<GloveParams>) -> Result<GloveRun> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::invalid("co-occurrence matrix is empty"));
    }
    let v = m.vocab_size() as usize;
    let init = match init {
        Some(p) => {
            p.check_shape()?;
            if p.vocab_size != v || p.dim != cfg.dim {
                return Err(Error::Dimension("initial parameters do not match config".into()));
            }
            p
        }
        None => GloveParams::random(v, cfg.dim, cfg.seed),
    };
    let state = SharedState::new(&init);
    let mut entries = m.full_entries();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        entries.shuffle(&mut rng);
        let cost = if cfg.threads <= 1 {
            state.run(&entries, cfg)
        } else {
            let chunk = entries.len().div_ceil(cfg.threads);
            let partial: Vec<f64> = std::thread::scope(|s| {
                let handles: Vec<_> = entries
                    .chunks(chunk)
                    .map(|part| {
                        let state = &state;
                        s.spawn(move || state.run(part, cfg))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            partial.iter().sum()
        };
        let mean = cost / entries.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("GloVe loss diverged at epoch {epoch}")));
        }
        debug!("glove epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let params = state.params(v);
    let d = cfg.dim;
    let data: Vec<f64> = params.w.iter().zip(&params.w_ctx).map(|(a, b)| a + b).collect();
    let embeddings = Embeddings::new(v, d, data)
        .map_err(|e| Error::Numerical(format!("trained embeddings invalid: {e}")))?
        .with_coverage(m.coverage())?;
    Ok(GloveRun {
        embeddings,
        params,
        epoch_losses,
    })
}
