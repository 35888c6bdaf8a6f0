//! The latent bottleneck: cross-attention from discrete to continuous
//! tokens, additive fusion, and hard-attention refinement.
//!
//! ```text
//! z_q    = straight_through(quantize(z_con))
//! z_dc   = MHA(queries = z_q, keys = values = z_con)        (h_s heads)
//! z_f    = z_q + z_con + z_dc
//! z_ref  = hard self-attention over z_f                      (h_h heads)
//! out    = z_f + z_ref          (or z_f alone when h_h = 0)
//! ```
//!
//! Scores are scaled dot products of per-head projections,
//! `q·k / sqrt(dim / heads)`. No positional encoding is added.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::quantizer::{self, QuantizeResult};
use crate::rng::SeededRng;

/// A latent map viewed as `[B, T, dim]` tokens with `T = height · width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenMap {
    pub fn new(g: &Graph, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::dim("token_map", s, &[height, width]));
        }
        Ok(TokenMap { tokens, height, width })
    }

    /// `[B, C, H, W]` spatial map to tokens.
    pub fn from_spatial(g: &mut Graph, x: Var) -> Result<Self> {
        let s = g.shape(x).to_vec();
        let tokens = g.to_tokens(x)?;
        TokenMap::new(g, tokens, s[2], s[3])
    }

    pub fn to_spatial(&self, g: &mut Graph) -> Result<Var> {
        g.from_tokens(self.tokens, self.height, self.width)
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        TokenMap { tokens, ..*self }
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[2]
    }
}

/// Per-head query/key/value projections (`dim × dim/heads` each) and the
/// `dim × dim` output matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub dim: usize,
    pub heads: usize,
}

/// Graph handles of one [`AttentionParams`].
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
    pub dim: usize,
    pub heads: usize,
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide dim {dim}")));
    }
    Ok(())
}

impl AttentionParams {
    /// Draw order: for each head query, key, value; then the output matrix.
    /// All uniform in `[-1/sqrt(dim), 1/sqrt(dim))`.
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        check_heads(dim, heads)?;
        let dh = dim / heads;
        let bound = 1.0 / (dim as f64).sqrt();
        let (mut query, mut key, mut value) = (vec![], vec![], vec![]);
        for h in 0..heads {
            query.push(store.add_uniform(format!("{prefix}.head{h}.query"), &[dim, dh], bound, rng));
            key.push(store.add_uniform(format!("{prefix}.head{h}.key"), &[dim, dh], bound, rng));
            value.push(store.add_uniform(format!("{prefix}.head{h}.value"), &[dim, dh], bound, rng));
        }
        let output = store.add_uniform(format!("{prefix}.output"), &[dim, dim], bound, rng);
        Ok(AttentionParams {
            query,
            key,
            value,
            output,
            dim,
            heads,
        })
    }

    pub fn vars(&self, b: &Bound) -> AttentionVars {
        AttentionVars {
            query: self.query.iter().map(|&p| b[p]).collect(),
            key: self.key.iter().map(|&p| b[p]).collect(),
            value: self.value.iter().map(|&p| b[p]).collect(),
            output: b[self.output],
            dim: self.dim,
            heads: self.heads,
        }
    }

    pub fn param_count(dim: usize, heads: usize) -> usize {
        3 * dim * (dim / heads) * heads + dim * dim
    }
}

impl AttentionVars {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        check_heads(self.dim, self.heads)?;
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim("attention", s, &[self.dim]));
        }
        Ok((s[0], s[1]))
    }
}

/// `[B, T, dim] · [dim, n] -> [B, T, n]`
fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let n = g.shape(w)[1];
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = g.matmul(flat, w)?;
    g.reshape(y, &[s[0], s[1], n])
}

/// Concatenates head outputs on the feature axis and applies `W^O`.
fn merge_heads(g: &mut Graph, heads: &[Var], output: Var) -> Result<Var> {
    let cat = g.concat(heads, 2)?;
    project(g, cat, output)
}

fn scaled_scores(g: &mut Graph, q: Var, k: Var, dh: usize) -> Result<Var> {
    let kt = g.transpose_last2(k)?;
    let s = g.bmm(q, kt)?;
    Ok(g.scale(s, 1.0 / (dh as f64).sqrt()))
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Softmax weights per head, `[B, Tq, Tk]`.
    pub weights: Vec<Var>,
}

/// Multi-head cross-attention of `queries` over `keys_values`.
pub fn mh_cross_attention(g: &mut Graph, queries: Var, keys_values: Var, p: &AttentionVars) -> Result<AttentionOutput> {
    let (bq, _) = p.check(g, queries)?;
    let (bk, _) = p.check(g, keys_values)?;
    if bq != bk {
        return Err(Error::dim("attention", g.shape(queries), g.shape(keys_values)));
    }
    let dh = p.head_dim();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = project(g, queries, p.query[h])?;
        let k = project(g, keys_values, p.key[h])?;
        let v = project(g, keys_values, p.value[h])?;
        let scores = scaled_scores(g, q, k, dh)?;
        let w = g.softmax(scores, 2)?;
        heads.push(g.bmm(w, v)?);
        weights.push(w);
    }
    let out = merge_heads(g, &heads, p.output)?;
    Ok(AttentionOutput { out, weights })
}

/// Discrete tokens query the continuous map.
pub fn disconx(g: &mut Graph, z_dis: TokenMap, z_con: TokenMap, p: &AttentionVars) -> Result<AttentionOutput> {
    if g.shape(z_dis.tokens) != g.shape(z_con.tokens) {
        return Err(Error::dim("disconx", g.shape(z_dis.tokens), g.shape(z_con.tokens)));
    }
    mh_cross_attention(g, z_dis.tokens, z_con.tokens, p)
}

/// `z_dis + z_con + z_attn`, shapes must match exactly.
pub fn fuse(g: &mut Graph, z_dis: Var, z_con: Var, z_attn: Var) -> Result<Var> {
    for other in [z_con, z_attn] {
        if g.shape(z_dis) != g.shape(other) {
            return Err(Error::dim("fuse", g.shape(z_dis), g.shape(other)));
        }
    }
    let s = g.add(z_dis, z_con)?;
    g.add(s, z_attn)
}

/// Backward behaviour of the refinement stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefinementMode {
    /// One-hot selection of the most similar token; the selection is a
    /// constant for the backward pass, so only the value path is trained.
    #[default]
    Hard,
    /// Softmax over `similarity / temperature`; tends to `Hard` as the
    /// temperature goes to zero.
    Softmax { temperature: f64 },
}

#[derive(Clone, Debug)]
pub struct HardAttentionOutput {
    pub out: Var,
    /// Selected key token per query, per head: `selection[h][b·T + i]`.
    pub selection: Vec<Vec<usize>>,
    /// Scaled similarities per head, `[B, T, T]`.
    pub similarity: Vec<Var>,
}

/// First maximum of each row.
pub fn argmax_rows(values: &[f64], row_len: usize) -> Vec<usize> {
    values
        .chunks_exact(row_len)
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Hardness-aware self-attention: every token takes the value of its most
/// similar token, per head.
pub fn hard_self_attention(
    g: &mut Graph,
    z_f: Var,
    p: &AttentionVars,
    mode: RefinementMode,
) -> Result<HardAttentionOutput> {
    let (_, t) = p.check(g, z_f)?;
    let dh = p.head_dim();
    let mut heads = Vec::with_capacity(p.heads);
    let mut selection = Vec::with_capacity(p.heads);
    let mut similarity = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let q = project(g, z_f, p.query[h])?;
        let k = project(g, z_f, p.key[h])?;
        let v = project(g, z_f, p.value[h])?;
        let sim = scaled_scores(g, q, k, dh)?;
        let sel = argmax_rows(g.value(sim), t);
        let head = match mode {
            RefinementMode::Hard => g.gather_tokens(v, &sel)?,
            RefinementMode::Softmax { temperature } => {
                if !(temperature > 0.0) {
                    return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
                }
                let s = g.scale(sim, 1.0 / temperature);
                let w = g.softmax(s, 2)?;
                g.bmm(w, v)?
            }
        };
        heads.push(head);
        selection.push(sel);
        similarity.push(sim);
    }
    let out = merge_heads(g, &heads, p.output)?;
    Ok(HardAttentionOutput {
        out,
        selection,
        similarity,
    })
}

/// How the discrete and continuous maps are combined before refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `z_q + z_con + DisConX(z_q, z_con)`
    #[default]
    Disconx,
    /// `z_q + z_con`, the ablation without cross-attention.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckConfig {
    pub dim: usize,
    pub h_s: usize,
    pub h_h: usize,
    pub beta: f64,
    pub fusion: FusionMode,
    pub refinement: RefinementMode,
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.fusion == FusionMode::Disconx {
            check_heads(self.dim, self.h_s)?;
        }
        if self.h_h > 0 {
            check_heads(self.dim, self.h_h)?;
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Parameters owned by the bottleneck (the codebook plus both attention
/// blocks when enabled).
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams {
    pub codebook: ParamId,
    pub disconx: Option<AttentionParams>,
    pub refine: Option<AttentionParams>,
}

impl BottleneckParams {
    /// Draw order: codebook, DisConX block, refinement block.
    pub fn init(store: &mut ParamStore, cfg: &BottleneckConfig, k: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let book = quantizer::Codebook::init(k, cfg.dim, rng)?;
        let codebook = store.add("bottleneck.codebook", book.entries().clone());
        let disconx = match cfg.fusion {
            FusionMode::Disconx => Some(AttentionParams::init(
                store,
                "bottleneck.disconx",
                cfg.dim,
                cfg.h_s,
                rng,
            )?),
            FusionMode::Plain => None,
        };
        let refine = if cfg.h_h > 0 {
            Some(AttentionParams::init(
                store,
                "bottleneck.refine",
                cfg.dim,
                cfg.h_h,
                rng,
            )?)
        } else {
            None
        };
        Ok(BottleneckParams {
            codebook,
            disconx,
            refine,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynergyOutput {
    pub z_f: Var,
    pub z_attn: Option<AttentionOutput>,
    pub refine: Option<HardAttentionOutput>,
    pub out: TokenMap,
}

/// Everything after quantization: cross-attention, fusion, refinement and
/// the final residual. `z_dis` is whatever stands in the discrete slot.
pub fn synergize(
    g: &mut Graph,
    z_con: TokenMap,
    z_dis: TokenMap,
    disconx_p: Option<&AttentionVars>,
    refine_p: Option<&AttentionVars>,
    mode: RefinementMode,
) -> Result<SynergyOutput> {
    let (z_f, z_attn) = match disconx_p {
        Some(p) => {
            let a = disconx(g, z_dis, z_con, p)?;
            (fuse(g, z_dis.tokens, z_con.tokens, a.out)?, Some(a))
        }
        None => {
            if g.shape(z_dis.tokens) != g.shape(z_con.tokens) {
                return Err(Error::dim("fuse", g.shape(z_dis.tokens), g.shape(z_con.tokens)));
            }
            (g.add(z_dis.tokens, z_con.tokens)?, None)
        }
    };
    let (out, refine) = match refine_p {
        Some(p) => {
            let r = hard_self_attention(g, z_f, p, mode)?;
            (g.add(z_f, r.out)?, Some(r))
        }
        None => (z_f, None),
    };
    Ok(SynergyOutput {
        z_f,
        z_attn,
        refine,
        out: z_con.with_tokens(out),
    })
}

#[derive(Clone, Debug)]
pub struct BottleneckOutput {
    pub quant: QuantizeResult,
    /// Straight-through discrete map fed to the attention stages.
    pub z_q: TokenMap,
    pub synergy: SynergyOutput,
}

impl BottleneckOutput {
    pub fn out(&self) -> TokenMap {
        self.synergy.out
    }

    pub fn quant_loss(&self) -> Var {
        self.quant.quant_loss
    }
}

pub fn bottleneck_forward(
    g: &mut Graph,
    z_con: TokenMap,
    codebook: Var,
    disconx_p: Option<&AttentionVars>,
    refine_p: Option<&AttentionVars>,
    beta: f64,
    mode: RefinementMode,
) -> Result<BottleneckOutput> {
    let quant = quantizer::quantize(g, z_con.tokens, codebook, beta)?;
    let st = quantizer::straight_through(g, z_con.tokens, quant.z_q)?;
    let z_q = z_con.with_tokens(st);
    let synergy = synergize(g, z_con, z_q, disconx_p, refine_p, mode)?;
    Ok(BottleneckOutput { quant, z_q, synergy })
}

/// Smallest gap between the chosen and the runner-up score over every
/// quantization and hard-selection decision of a forward pass. Finite
/// difference steps below this cannot flip a decision.
pub fn decision_margin(g: &Graph, z_con: Var, codebook: Var, out: &BottleneckOutput) -> f64 {
    let dim = *g.shape(codebook).last().unwrap();
    let table = g.value(codebook);
    let mut margin = f64::INFINITY;
    if table.len() / dim > 1 {
        for t in g.value(z_con).chunks_exact(dim) {
            let mut d: Vec<f64> = table
                .chunks_exact(dim)
                .map(|e| t.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            d.sort_by(f64::total_cmp);
            margin = margin.min(d[1] - d[0]);
        }
    }
    if let Some(r) = &out.synergy.refine {
        margin = margin.min(selection_margin(g, r));
    }
    margin
}

/// Smallest top-1 minus top-2 similarity gap of a refinement pass.
pub fn selection_margin(g: &Graph, r: &HardAttentionOutput) -> f64 {
    let mut margin = f64::INFINITY;
    for &sim in &r.similarity {
        let t = g.shape(sim)[2];
        if t < 2 {
            continue;
        }
        for row in g.value(sim).chunks_exact(t) {
            let mut s = row.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(s[0] - s[1]);
        }
    }
    margin
}
