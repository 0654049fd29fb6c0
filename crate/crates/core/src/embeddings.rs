//! Dense token embedding matrices bound to a vocabulary.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{read_bundle, write_bundle, Tensor, TensorBundle};

/// A `rows × dim` real matrix, one row per token, plus per-row coverage flags.
///
/// A row is *covered* when it was learned from data; uncovered rows keep
/// whatever initialization produced them and are aligned with low confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    covered: Vec<bool>,
    /// Number of corpus tokens the representation was trained on (0 if unknown).
    pub trained_token_count: u64,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("embedding dimension must be at least 1".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "{rows}×{dim} embedding needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite embedding value in row {}",
                pos / dim
            )));
        }
        Ok(Self {
            data,
            rows,
            dim,
            covered: vec![true; rows],
            trained_token_count: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Dimension(format!("row {i} has {} values, expected {dim}", r.len())));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn with_coverage(mut self, covered: Vec<bool>) -> Result<Self> {
        if covered.len() != self.rows {
            return Err(Error::Dimension(format!(
                "coverage has {} flags for {} rows",
                covered.len(),
                self.rows
            )));
        }
        self.covered = covered;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_covered(&self, i: usize) -> bool {
        self.covered[i]
    }

    pub fn coverage_flags(&self) -> &[bool] {
        &self.covered
    }

    /// Fraction of rows learned from data.
    pub fn coverage(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        self.covered.iter().filter(|&&c| c).count() as f64 / self.rows as f64
    }

    pub fn covered_indices(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.covered[i]).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.dim, &self.data)
    }

    /// Replaces the values with `m` (same shape), keeping coverage.
    pub fn from_matrix_like(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != self.rows {
            return Err(Error::Dimension(format!("matrix has {} rows, expected {}", m.nrows(), self.rows)));
        }
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        let mut out = Self::new(m.nrows(), m.ncols(), data)?;
        out.covered = self.covered.clone();
        out.trained_token_count = self.trained_token_count;
        Ok(out)
    }

    /// The TAL representation: `embedding` (rows×dim) and `coverage` (rows, 0/1).
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        let emb = self.data.iter().map(|&x| x as f32).collect();
        b.insert("embedding", Tensor::new(vec![self.rows, self.dim], emb).expect("shape matches"))
            .expect("name not reserved");
        let cov = self.covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        b.insert("coverage", Tensor::new(vec![self.rows], cov).expect("shape matches"))
            .expect("name not reserved");
        b.set_metadata("trained_token_count", self.trained_token_count.to_string());
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let t = b.require("embedding")?;
        let (rows, dim) = t.matrix_dims()?;
        let mut e = Self::new(rows, dim, t.data().iter().map(|&x| f64::from(x)).collect())?;
        if let Some(cov) = b.get("coverage") {
            e = e.with_coverage(cov.data().iter().map(|&x| x != 0.0).collect())?;
        }
        if let Some(n) = b.metadata().get("trained_token_count") {
            e.trained_token_count = n
                .parse()
                .map_err(|_| Error::format(format!("bad trained_token_count {n:?}")))?;
        }
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bundle(&self.to_bundle(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&read_bundle(path)?)
    }

    /// Text format: `"rows dim"` header line, then `id v1 … vd` per row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.rows, self.dim).expect("string write");
        for i in 0..self.rows {
            write!(out, "{i}").expect("string write");
            for x in self.row(i) {
                write!(out, " {x}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty embedding text file"))?;
        let mut hp = header.split_whitespace().map(str::parse::<usize>);
        let (rows, dim) = match (hp.next(), hp.next(), hp.next()) {
            (Some(Ok(r)), Some(Ok(d)), None) => (r, d),
            _ => return Err(Error::format(format!("bad embedding header {header:?}"))),
        };
        let mut data = vec![0.0; rows * dim];
        let mut seen = vec![false; rows];
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .filter(|&id| id < rows)
                .ok_or_else(|| Error::format(format!("line {}: bad token id", n + 2)))?;
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::format(format!("line {}: duplicate token id {id}", n + 2)));
            }
            let vals: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("line {}: {e}", n + 2)))?;
            if vals.len() != dim {
                return Err(Error::format(format!("line {}: {} values, expected {dim}", n + 2, vals.len())));
            }
            data[id * dim..(id + 1) * dim].copy_from_slice(&vals);
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::format(format!("embedding text file lacks token id {missing}")));
        }
        Self::new(rows, dim, data)
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
