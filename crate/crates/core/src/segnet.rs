//! Encoder, bottleneck and decoder assembled into a segmentation network.
//!
//! ```text
//! image ─ enc_0 ─ pool ─ enc_1 ─ pool ─ … ─ pre ─ bottleneck ─ post
//!           │              │                                   │
//!           └──────────────┼──── (skips) ───────── dec_0 ─ … ─ up
//!                                                     │
//!                                                   head ─ logits
//! ```
//!
//! Each encoder and decoder stage is two `conv3×3 → GroupNorm → ReLU`
//! layers. Stages are joined by 2×2 average pooling on the way down and
//! nearest 2× upsampling on the way up.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bottleneck::{
    bottleneck_forward, check_heads, AttentionParams, BottleneckConfig, BottleneckOutput, BottleneckParams, FusionMode,
    RefinementMode, TokenMap,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::quantizer::DEFAULT_BETA;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

fn default_in_channels() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_quant_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub dim: usize,
    /// Codebook size.
    #[serde(rename = "K")]
    pub k: usize,
    pub h_s: usize,
    pub h_h: usize,
    #[serde(default = "default_true")]
    pub use_skips: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default)]
    pub refinement: RefinementMode,
    /// Weight of the quantization loss in the total.
    #[serde(default = "default_quant_weight")]
    pub quant_weight: f64,
    pub seed: u64,
}

fn conv_count(i: usize, o: usize, k: usize) -> usize {
    o * i * k * k + o
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return fail("encoder_channels must be non-empty and positive".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return fail("need in_channels >= 1 and num_classes >= 2".into());
        }
        if self.k < 2 {
            return fail(format!("K must be >= 2, got {}", self.k));
        }
        if !(self.quant_weight >= 0.0 && self.quant_weight.is_finite()) {
            return fail(format!(
                "quant_weight must be finite and >= 0, got {}",
                self.quant_weight
            ));
        }
        if self.fusion == FusionMode::Disconx {
            check_heads(self.dim, self.h_s)?;
        }
        self.bottleneck().validate()
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn bottleneck(&self) -> BottleneckConfig {
        BottleneckConfig {
            dim: self.dim,
            h_s: self.h_s,
            h_h: self.h_h,
            beta: self.beta,
            fusion: self.fusion,
            refinement: self.refinement,
        }
    }

    /// Closed-form parameter count; see the README for the derivation.
    pub fn param_count(&self) -> usize {
        let ch = &self.encoder_channels;
        let last = *ch.last().unwrap();
        let block = |i: usize, o: usize| conv_count(i, o, 3) + 2 * o + conv_count(o, o, 3) + 2 * o;
        let mut n = 0;
        let mut prev = self.in_channels;
        for &c in ch {
            n += block(prev, c);
            prev = c;
        }
        n += conv_count(last, self.dim, 3) + 2 * self.dim + conv_count(self.dim, self.dim, 3);
        n += self.k * self.dim;
        if self.fusion == FusionMode::Disconx {
            n += AttentionParams::param_count(self.dim, self.h_s);
        }
        if self.h_h > 0 {
            n += AttentionParams::param_count(self.dim, self.h_h);
        }
        n += block(self.dim, last);
        let mut up = last;
        for &c in ch.iter().rev() {
            let skip = if self.use_skips { c } else { 0 };
            n += block(up + skip, c);
            up = c;
        }
        n + conv_count(ch[0], self.num_classes, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// `conv → norm → relu`, or a bare convolution when `norm` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub conv: Conv,
    pub norm: Option<Norm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub encoder: Vec<[ConvLayer; 2]>,
    pub pre: [ConvLayer; 2],
    pub bottleneck: BottleneckParams,
    pub post: [ConvLayer; 2],
    /// Ordered from the deepest stage to the full-resolution one.
    pub decoder: Vec<[ConvLayer; 2]>,
    pub head: Conv,
}

fn add_conv(store: &mut ParamStore, name: &str, i: usize, o: usize, k: usize, rng: &mut SeededRng) -> Conv {
    let bound = (6.0 / (i * k * k) as f64).sqrt();
    let weight = store.add_uniform(format!("{name}.weight"), &[o, i, k, k], bound, rng);
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[o]));
    Conv { weight, bias }
}

fn add_layer(store: &mut ParamStore, name: &str, i: usize, o: usize, norm: bool, rng: &mut SeededRng) -> ConvLayer {
    let conv = add_conv(store, &format!("{name}.conv"), i, o, 3, rng);
    let norm = norm.then(|| Norm {
        gamma: store.add(format!("{name}.norm.gamma"), Tensor::ones(&[o])),
        beta: store.add(format!("{name}.norm.beta"), Tensor::zeros(&[o])),
    });
    ConvLayer { conv, norm }
}

fn add_block(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut SeededRng) -> [ConvLayer; 2] {
    [
        add_layer(store, &format!("{name}.0"), i, o, true, rng),
        add_layer(store, &format!("{name}.1"), o, o, true, rng),
    ]
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, num_classes, H, W]`
    pub logits: Var,
    /// Unweighted quantization loss.
    pub quant_loss: Var,
    /// Continuous latent entering the quantizer, `[B, dim, h, w]`.
    pub latent: Var,
    pub bottleneck: BottleneckOutput,
}

impl SegModel {
    /// Builds the model and draws every parameter from a generator seeded
    /// with `config.seed`, in the order encoder, pre-quantization block,
    /// bottleneck, post block, decoder, head.
    pub fn init(config: &ModelConfig) -> Result<(SegModel, ParamStore)> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let ch = &config.encoder_channels;
        let last = *ch.last().unwrap();

        let mut encoder = Vec::with_capacity(ch.len());
        let mut prev = config.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(add_block(s, &format!("encoder.{i}"), prev, c, &mut rng));
            prev = c;
        }
        let pre = [
            add_layer(s, "pre.0", last, config.dim, true, &mut rng),
            add_layer(s, "pre.1", config.dim, config.dim, false, &mut rng),
        ];
        let bottleneck = BottleneckParams::init(s, &config.bottleneck(), config.k, &mut rng)?;
        let post = add_block(s, "post", config.dim, last, &mut rng);
        let mut decoder = Vec::with_capacity(ch.len());
        let mut up = last;
        for (i, &c) in ch.iter().enumerate().rev() {
            let skip = if config.use_skips { c } else { 0 };
            decoder.push(add_block(s, &format!("decoder.{i}"), up + skip, c, &mut rng));
            up = c;
        }
        let head = add_conv(s, "head", ch[0], config.num_classes, 1, &mut rng);
        let model = SegModel {
            config: config.clone(),
            encoder,
            pre,
            bottleneck,
            post,
            decoder,
            head,
        };
        Ok((model, store))
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1usize << self.config.stages();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::dim("forward", shape, &[self.config.in_channels]));
        }
        if !shape[2].is_multiple_of(f) || !shape[3].is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {}×{} is not divisible by 2^{}",
                shape[2],
                shape[3],
                self.config.stages()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, images: Var) -> Result<ForwardOutput> {
        self.check_input(g.shape(images))?;
        let mut x = images;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = run_block(g, b, block, x)?;
            skips.push(x);
            x = g.avg_pool2x(x)?;
        }
        x = run_layer(g, b, &self.pre[0], x)?;
        let latent = run_layer(g, b, &self.pre[1], x)?;

        let tokens = TokenMap::from_spatial(g, latent)?;
        let dx = self.bottleneck.disconx.as_ref().map(|p| p.vars(b));
        let rf = self.bottleneck.refine.as_ref().map(|p| p.vars(b));
        let bn = bottleneck_forward(
            g,
            tokens,
            b[self.bottleneck.codebook],
            dx.as_ref(),
            rf.as_ref(),
            self.config.beta,
            self.config.refinement,
        )?;
        x = bn.out().to_spatial(g)?;
        x = run_block(g, b, &self.post, x)?;

        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = g.upsample_nearest2x(x)?;
            if self.config.use_skips {
                x = g.concat(&[x, *skip], 1)?;
            }
            x = run_block(g, b, block, x)?;
        }
        let logits = g.conv2d(x, b[self.head.weight], Some(b[self.head.bias]), 1, 0)?;
        Ok(ForwardOutput {
            logits,
            quant_loss: bn.quant_loss(),
            latent,
            bottleneck: bn,
        })
    }
}

fn run_layer(g: &mut Graph, b: &Bound, layer: &ConvLayer, x: Var) -> Result<Var> {
    let y = g.conv2d(x, b[layer.conv.weight], Some(b[layer.conv.bias]), 1, 1)?;
    match &layer.norm {
        Some(n) => {
            let y = g.group_norm(y, b[n.gamma], b[n.beta], NORM_EPS)?;
            Ok(g.relu(y))
        }
        None => Ok(y),
    }
}

fn run_block(g: &mut Graph, b: &Bound, block: &[ConvLayer; 2], x: Var) -> Result<Var> {
    let y = run_layer(g, b, &block[0], x)?;
    run_layer(g, b, &block[1], y)
}

/// Per-pixel argmax over classes of `[B, C, H, W]` logits; first maximum
/// wins.
pub fn predict_labels(logits: &[f64], shape: &[usize]) -> Vec<usize> {
    let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(bs * hw);
    for bi in 0..bs {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if logits[base + k * hw + p] > logits[base + best * hw + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}
