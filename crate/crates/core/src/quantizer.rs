//! Vector quantization of latent tokens against a learned codebook.
//!
//! Each token is replaced by its nearest codebook row (squared Euclidean
//! distance, lowest index on ties). The loss is split the usual way:
//!
//! ```text
//! L_quant = mean_t ‖sg(z_con) - z_q‖² + beta · mean_t ‖z_con - sg(z_q)‖²
//! ```
//!
//! so the codebook only moves through the first term and the encoder only
//! through the commitment term. With `beta = 0` only the codebook moves.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.25;

/// The `K × dim` matrix of discrete embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::shape(
                "codebook",
                format!("expected [K, dim], got {:?}", entries.shape()),
            ));
        }
        if !entries.is_finite() {
            return Err(Error::Domain("codebook entries must be finite".into()));
        }
        Ok(Codebook { entries })
    }

    /// Uniform draws in `[-1/K, 1/K)`, row-major.
    pub fn init(k: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "codebook needs K >= 2 and dim >= 1, got K={k}, dim={dim}"
            )));
        }
        Codebook::new(Tensor::from_fn(&[k, dim], |_| init_draw(k, rng)))
    }

    pub fn k(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Nearest code for every `dim`-wide token in `tokens`.
    pub fn assign(&self, tokens: &[f64]) -> Result<Vec<usize>> {
        nearest_codes(tokens, self.entries.data(), self.dim())
    }
}

pub(crate) fn init_draw(k: usize, rng: &mut SeededRng) -> f64 {
    let b = 1.0 / k as f64;
    rng.uniform(-b, b)
}

/// Index of the closest row of `table` (row-major, `dim` wide) for each
/// token; the first minimum wins.
pub fn nearest_codes(tokens: &[f64], table: &[f64], dim: usize) -> Result<Vec<usize>> {
    if dim == 0 || !tokens.len().is_multiple_of(dim) || !table.len().is_multiple_of(dim) || table.is_empty() {
        return Err(Error::dim("quantize", &[tokens.len(), dim], &[table.len(), dim]));
    }
    Ok(tokens
        .chunks_exact(dim)
        .map(|t| {
            let mut best = (0, f64::INFINITY);
            for (k, e) in table.chunks_exact(dim).enumerate() {
                let d: f64 = t.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct QuantizeResult {
    /// Selected rows, differentiable w.r.t. the codebook only.
    pub z_q: Var,
    pub indices: Vec<usize>,
    pub quant_loss: Var,
}

/// Quantizes `z_con` (`[..., dim]`) against the codebook `book` (`[K, dim]`)
/// and builds the two-term quantization loss.
pub fn quantize(g: &mut Graph, z_con: Var, book: Var, beta: f64) -> Result<QuantizeResult> {
    let (zs, bs) = (g.shape(z_con).to_vec(), g.shape(book).to_vec());
    if bs.len() != 2 || zs.last() != Some(&bs[1]) {
        return Err(Error::dim("quantize", &zs, &bs));
    }
    let indices = nearest_codes(g.value(z_con), g.value(book), bs[1])?;
    let z_q = g.gather_rows(book, &indices, &zs)?;
    let quant_loss = quantization_loss(g, z_con, z_q, beta)?;
    Ok(QuantizeResult {
        z_q,
        indices,
        quant_loss,
    })
}

/// `mean_t ‖sg(z_con) - z_q‖² + beta · mean_t ‖z_con - sg(z_q)‖²`
pub fn quantization_loss(g: &mut Graph, z_con: Var, z_q: Var, beta: f64) -> Result<Var> {
    if g.shape(z_con) != g.shape(z_q) {
        return Err(Error::dim("quantization_loss", g.shape(z_con), g.shape(z_q)));
    }
    let shape = g.shape(z_con);
    let dim = *shape.last().unwrap_or(&1);
    let tokens = (g.value(z_con).len() / dim) as f64;

    let con_sg = g.detach(z_con);
    let d = g.sub(con_sg, z_q)?;
    let d = g.square(d);
    let d = g.sum(d);
    let codebook_term = g.scale(d, 1.0 / tokens);

    let q_sg = g.detach(z_q);
    let c = g.sub(z_con, q_sg)?;
    let c = g.square(c);
    let c = g.sum(c);
    let commit_term = g.scale(c, beta / tokens);
    g.add(codebook_term, commit_term)
}

/// Passes `z_q` forward and the gradient straight back to `z_con`.
pub fn straight_through(g: &mut Graph, z_con: Var, z_q: Var) -> Result<Var> {
    g.straight_through(z_con, z_q)
}

/// Code usage over some window (typically an epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub counts: Vec<u64>,
    pub total: u64,
    /// Fraction of codes hit at least once.
    pub utilization: f64,
    pub dead_fraction: f64,
    /// `exp(H)` of the empirical code distribution.
    pub perplexity: f64,
}

pub fn codebook_stats(indices: &[usize], k: usize) -> CodebookStats {
    let mut counts = vec![0u64; k];
    for &i in indices {
        counts[i] += 1;
    }
    CodebookStats::from_counts(counts)
}

impl CodebookStats {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let k = counts.len().max(1) as f64;
        let total: u64 = counts.iter().sum();
        let used = counts.iter().filter(|&&c| c > 0).count() as f64;
        let entropy = if total == 0 {
            0.0
        } else {
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        };
        CodebookStats {
            total,
            utilization: used / k,
            dead_fraction: 1.0 - used / k,
            perplexity: entropy.exp(),
            counts,
        }
    }

    pub fn merge(&mut self, indices: &[usize]) {
        for &i in indices {
            self.counts[i] += 1;
        }
        *self = Self::from_counts(std::mem::take(&mut self.counts));
    }

    pub fn dead_codes(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }
}
