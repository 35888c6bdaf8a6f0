//! Finite-difference sweep over every differentiable operation, the loss
//! functions, the straight-through path and the composed bottleneck.
//!
//! Each check reduces its output to a scalar through a fixed, non-uniform
//! weighting so that no output coordinate hides behind a symmetric sum
//! (softmax rows, for instance, always sum to one).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bottleneck::{
    selection_margin, synergize, BottleneckConfig, BottleneckParams, FusionMode, RefinementMode, SynergyOutput,
    TokenMap,
};
use crate::error::{Error, Result};
use crate::gradcheck::fd_check;
use crate::loss::{seg_loss, seg_loss_logits, soft_dice};
use crate::params::{Bound, ParamStore};
use crate::quantizer::{quantization_loss, DEFAULT_BETA};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// The composed bottleneck is held to this multiple of the per-op tolerance.
pub const COMPOSED_FACTOR: f64 = 10.0;

/// Hard selections must beat the runner-up by this many `eps` before an
/// instance is used for the composed check.
pub const MARGIN_STEPS: f64 = 100.0;

const MAX_DRAWS: usize = 1000;

fn default_dim() -> usize {
    8
}
fn default_side() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_instances() -> usize {
    3
}

/// Sizes of the composed-bottleneck instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_heads")]
    pub h_s: usize,
    #[serde(default = "default_heads")]
    pub h_h: usize,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_instances")]
    pub instances: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        }
    }
}

fn weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (0.7 * i as f64 + 0.3).sin())
}

/// `sum(y ⊙ w)` with the fixed weighting above.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let w = weights(g.shape(y));
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Magnitudes in `[lo, hi)` with random signs, keeping clear of kinks and poles.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(lo, hi);
        if rng.below(2) == 0 {
            m
        } else {
            -m
        }
    })
}

type MultiFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

/// Largest error over every input, each perturbed with the others held fixed.
fn check_all(inputs: &[Tensor], f: &MultiFn, eps: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let err = fd_check(
            |g, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { v } else { g.constant(t) })
                    .collect();
                let y = f(g, &vars)?;
                project(g, y)
            },
            &inputs[i],
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn op_checks(rng: &mut SeededRng) -> Vec<(&'static str, Vec<Tensor>, MultiFn<'static>)> {
    let r = |s: &[usize], rng: &mut SeededRng| uniform(s, -1.0, 1.0, rng);
    let mut v: Vec<(&'static str, Vec<Tensor>, MultiFn<'static>)> = Vec::new();
    macro_rules! check {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            v.push(($name, vec![$($t),*], Box::new($f)))
        };
    }
    check!("add", [r(&[2, 3, 4], rng), r(&[2, 3, 4], rng)], |g, x| g
        .add(x[0], x[1]));
    check!(
        "add (suffix broadcast)",
        [r(&[2, 3, 4], rng), r(&[3, 4], rng)],
        |g, x| g.add(x[0], x[1])
    );
    check!(
        "add (scalar broadcast)",
        [r(&[2, 3], rng), Tensor::scalar(0.4)],
        |g, x| g.add(x[0], x[1])
    );
    check!("sub", [r(&[2, 3, 4], rng), r(&[4], rng)], |g, x| g.sub(x[0], x[1]));
    check!("mul", [r(&[2, 3, 4], rng), r(&[2, 3, 4], rng)], |g, x| g
        .mul(x[0], x[1]));
    check!("mul (suffix broadcast)", [r(&[3, 4], rng), r(&[4], rng)], |g, x| g
        .mul(x[0], x[1]));
    check!(
        "div",
        [r(&[2, 3, 4], rng), away_from_zero(&[2, 3, 4], 0.5, 1.5, rng)],
        |g, x| g.div(x[0], x[1])
    );
    check!("scale", [r(&[5], rng)], |g, x| Ok(g.scale(x[0], -2.5)));
    check!("add_scalar", [r(&[5], rng)], |g, x| Ok(g.add_scalar(x[0], 1.5)));
    check!(
        "relu",
        [away_from_zero(&[3, 4], 0.1, 1.0, rng)],
        |g, x| Ok(g.relu(x[0]))
    );
    check!(
        "sigmoid",
        [uniform(&[3, 4], -4.0, 4.0, rng)],
        |g, x| Ok(g.sigmoid(x[0]))
    );
    check!("softplus", [uniform(&[3, 4], -4.0, 4.0, rng)], |g, x| Ok(
        g.softplus(x[0])
    ));
    check!("ln", [uniform(&[3, 4], 0.5, 2.0, rng)], |g, x| Ok(g.ln(x[0])));
    check!("exp", [r(&[3, 4], rng)], |g, x| Ok(g.exp(x[0])));
    check!("square", [r(&[3, 4], rng)], |g, x| Ok(g.square(x[0])));
    check!("sqrt", [uniform(&[3, 4], 0.5, 2.0, rng)], |g, x| Ok(g.sqrt(x[0])));
    check!("sum", [r(&[2, 3], rng)], |g, x| {
        let s = g.sum(x[0]);
        Ok(g.square(s))
    });
    check!("mean", [r(&[2, 3], rng)], |g, x| {
        let s = g.mean(x[0]);
        Ok(g.square(s))
    });
    check!("channel_sum", [r(&[2, 3, 2, 2], rng)], |g, x| g.channel_sum(x[0]));
    check!("matmul", [r(&[3, 4], rng), r(&[4, 5], rng)], |g, x| g
        .matmul(x[0], x[1]));
    check!("bmm", [r(&[2, 3, 4], rng), r(&[2, 4, 5], rng)], |g, x| g
        .bmm(x[0], x[1]));
    check!("transpose_last2", [r(&[2, 3, 4], rng)], |g, x| g.transpose_last2(x[0]));
    check!("reshape", [r(&[2, 3, 4], rng)], |g, x| g.reshape(x[0], &[6, 4]));
    check!("softmax (last axis)", [uniform(&[2, 3, 4], -2.0, 2.0, rng)], |g, x| g
        .softmax(x[0], 2));
    check!("softmax (inner axis)", [uniform(&[2, 3, 4], -2.0, 2.0, rng)], |g, x| g
        .softmax(x[0], 1));
    check!(
        "conv2d 3x3",
        [r(&[2, 3, 5, 5], rng), r(&[4, 3, 3, 3], rng), r(&[4], rng)],
        |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1)
    );
    check!(
        "conv2d strided",
        [r(&[1, 2, 5, 5], rng), r(&[3, 2, 3, 3], rng)],
        |g, x| g.conv2d(x[0], x[1], None, 2, 0)
    );
    check!(
        "conv2d 1x1",
        [r(&[2, 3, 3, 3], rng), r(&[2, 3, 1, 1], rng), r(&[2], rng)],
        |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 0)
    );
    check!("avg_pool2x", [r(&[2, 2, 4, 6], rng)], |g, x| g.avg_pool2x(x[0]));
    check!("upsample_nearest2x", [r(&[2, 2, 2, 3], rng)], |g, x| g
        .upsample_nearest2x(x[0]));
    check!(
        "group_norm",
        [r(&[2, 4, 3, 3], rng), uniform(&[4], 0.5, 1.5, rng), r(&[4], rng)],
        |g, x| g.group_norm(x[0], x[1], x[2], 1e-5)
    );
    check!("concat", [r(&[1, 2, 2, 2], rng), r(&[1, 3, 2, 2], rng)], |g, x| g
        .concat(&[x[0], x[1]], 1));
    check!("gather_rows", [r(&[5, 3], rng)], |g, x| g.gather_rows(
        x[0],
        &[4, 0, 4, 2],
        &[2, 2, 3]
    ));
    check!("gather_tokens", [r(&[2, 4, 3], rng)], |g, x| g
        .gather_tokens(x[0], &[3, 3, 0, 1, 2, 1]));
    check!("to_tokens", [r(&[2, 3, 2, 2], rng)], |g, x| g.to_tokens(x[0]));
    check!("from_tokens", [r(&[2, 6, 3], rng)], |g, x| g.from_tokens(x[0], 2, 3));
    v
}

fn one_hot_truth(rng: &mut SeededRng) -> Tensor {
    let (b, c, hw) = (2, 3, 4);
    let labels: Vec<usize> = (0..b * hw).map(|_| rng.below(c)).collect();
    Tensor::from_fn(&[b, c, 2, 2], |i| {
        let (bi, ci, p) = (i / (c * hw), (i / hw) % c, i % hw);
        (labels[bi * hw + p] == ci) as u8 as f64
    })
}

fn loss_checks(rng: &mut SeededRng, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let truth = one_hot_truth(rng);
    let probs = uniform(truth.shape(), 0.05, 0.95, rng);
    let logits = uniform(truth.shape(), -3.0, 3.0, rng);
    let mut out = vec![
        ("soft_dice", fd_check(|g, v| soft_dice(g, v, &truth), &probs, eps)?),
        ("seg_loss", fd_check(|g, v| seg_loss(g, v, &truth), &probs, eps)?),
        (
            "seg_loss_logits",
            fd_check(|g, v| seg_loss_logits(g, v, &truth), &logits, eps)?,
        ),
    ];

    let z_con = uniform(&[1, 3, 4], -1.0, 1.0, rng);
    let z_q = uniform(&[1, 3, 4], -1.0, 1.0, rng);
    // beta = 0 leaves only the codebook term, whose gradient is all on z_q
    let codebook = fd_check(
        |g, v| {
            let c = g.constant(&z_con);
            quantization_loss(g, c, v, 0.0)
        },
        &z_q,
        eps,
    )?;
    // subtracting the beta = 0 loss isolates the commitment term on z_con
    let commitment = fd_check(
        |g, v| {
            let q = g.constant(&z_q);
            let full = quantization_loss(g, v, q, DEFAULT_BETA)?;
            let codebook_only = quantization_loss(g, v, q, 0.0)?;
            g.sub(full, codebook_only)
        },
        &z_con,
        eps,
    )?;
    out.push(("quantization_loss codebook term", codebook));
    out.push(("quantization_loss commitment term", commitment));
    Ok(out)
}

/// Largest deviation of the straight-through Jacobian from the identity,
/// probed one unit vector at a time.
pub fn straight_through_deviation(rng: &mut SeededRng) -> Result<f64> {
    let (tokens, dim, k) = (3, 4, 5);
    let z = uniform(&[1, tokens, dim], -1.0, 1.0, rng);
    let book = uniform(&[k, dim], -1.0, 1.0, rng);
    let n = z.numel();
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut g = Graph::new();
        let zv = g.param(&z);
        let bv = g.param(&book);
        let q = crate::quantizer::quantize(&mut g, zv, bv, DEFAULT_BETA)?;
        let st = crate::quantizer::straight_through(&mut g, zv, q.z_q)?;
        let unit = g.constant(&Tensor::from_fn(z.shape(), |j| (j == i) as u8 as f64));
        let y = g.mul(st, unit)?;
        let y = g.sum(y);
        g.backward(y)?;
        let col = g.grad(zv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (j, c) in col.iter().enumerate() {
            worst = worst.max((c - (j == i) as u8 as f64).abs());
        }
        if let Some(gb) = g.grad(bv) {
            worst = gb.iter().fold(worst, |w, v| w.max(v.abs()));
        }
    }
    Ok(worst)
}

/// Cross-attention, fusion and refinement with the discrete map supplied as
/// an independent input, checked against finite differences with respect to
/// both maps and every attention parameter. Instances whose hard selection
/// could flip under a step of `eps` are redrawn.
pub fn composed_bottleneck(cfg: &GradcheckConfig, eps: f64, rng: &mut SeededRng) -> Result<f64> {
    let bcfg = BottleneckConfig {
        dim: cfg.dim,
        h_s: cfg.h_s,
        h_h: cfg.h_h,
        beta: DEFAULT_BETA,
        fusion: cfg.fusion,
        refinement: RefinementMode::Hard,
    };
    bcfg.validate()?;
    let (h, w, dim) = (cfg.height, cfg.width, cfg.dim);
    let shape = [1, h * w, dim];
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut draws = 0;
    while checked < cfg.instances {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::Contract(format!(
                "no instance with selection margin >= {} in {MAX_DRAWS} draws",
                MARGIN_STEPS * eps
            )));
        }
        let mut store = ParamStore::new();
        let params = BottleneckParams::init(&mut store, &bcfg, 2, rng)?;
        // widen the attention weights so scores are well separated
        for id in store.ids().skip(1).collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 3.0);
        }
        let z_con = uniform(&shape, -1.0, 1.0, rng);
        let z_dis = uniform(&shape, -1.0, 1.0, rng);

        let forward = |g: &mut Graph, con: Var, dis: Var, b: &Bound| -> Result<(Var, SynergyOutput)> {
            let dx = params.disconx.as_ref().map(|p| p.vars(b));
            let rf = params.refine.as_ref().map(|p| p.vars(b));
            let cm = TokenMap::new(g, con, h, w)?;
            let dm = TokenMap::new(g, dis, h, w)?;
            let s = synergize(g, cm, dm, dx.as_ref(), rf.as_ref(), RefinementMode::Hard)?;
            Ok((project(g, s.out.tokens)?, s))
        };
        let selection = |s: &SynergyOutput| s.refine.as_ref().map(|r| r.selection.clone());

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let (c, d) = (g.leaf(&z_con), g.leaf(&z_dis));
        let (_, s) = forward(&mut g, c, d, &b)?;
        let margin = s.refine.as_ref().map_or(f64::INFINITY, |r| selection_margin(&g, r));
        if margin < MARGIN_STEPS * eps {
            continue;
        }
        let chosen = selection(&s);
        let same = |s: &SynergyOutput| -> Result<()> {
            if selection(s) != chosen {
                return Err(Error::Contract("a perturbation flipped a hard selection".into()));
            }
            Ok(())
        };

        worst = worst.max(fd_check(
            |g, v| {
                let b = store.bind(g);
                let d = g.constant(&z_dis);
                let (y, s) = forward(g, v, d, &b)?;
                same(&s)?;
                Ok(y)
            },
            &z_con,
            eps,
        )?);
        worst = worst.max(fd_check(
            |g, v| {
                let b = store.bind(g);
                let c = g.constant(&z_con);
                let (y, s) = forward(g, c, v, &b)?;
                same(&s)?;
                Ok(y)
            },
            &z_dis,
            eps,
        )?);
        for id in store.ids().skip(1) {
            worst = worst.max(fd_check(
                |g, v| {
                    let mut b = store.bind(g);
                    b.replace(id, v);
                    let c = g.constant(&z_con);
                    let d = g.constant(&z_dis);
                    let (y, s) = forward(g, c, d, &b)?;
                    same(&s)?;
                    Ok(y)
                },
                store.get(id),
                eps,
            )?);
        }
        checked += 1;
    }
    Ok(worst)
}

/// Runs the whole sweep. Elementary operations and losses are held to
/// `tolerance`, the composed bottleneck to `COMPOSED_FACTOR · tolerance`.
pub fn run_gradcheck(cfg: &GradcheckConfig, eps: f64, tolerance: f64) -> Result<Vec<CheckResult>> {
    if !(eps > 0.0 && tolerance > 0.0) {
        return Err(Error::Config(format!(
            "eps and tolerance must be > 0, got {eps} and {tolerance}"
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut results = Vec::new();
    for (name, inputs, f) in op_checks(&mut rng) {
        results.push(CheckResult::new(name, check_all(&inputs, &f, eps)?, tolerance));
    }
    for (name, err) in loss_checks(&mut rng, eps)? {
        results.push(CheckResult::new(name, err, tolerance));
    }
    results.push(CheckResult::new(
        "straight_through (unit vectors)",
        straight_through_deviation(&mut rng)?,
        tolerance,
    ));
    results.push(CheckResult::new(
        "bottleneck (composed)",
        composed_bottleneck(cfg, eps, &mut rng)?,
        COMPOSED_FACTOR * tolerance,
    ));
    Ok(results)
}
