//! Segmentation loss: per-class binary cross-entropy plus soft Dice.
//!
//! ```text
//! L_seg = mean(BCE(p, t)) + 1 - mean_c (2 Σ p·t + ε) / (Σ p + Σ t + ε)
//! ```
//!
//! Sums in the Dice term run over batch and pixels of one class.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;

/// `[B, C, H, W]` one-hot encoding of `[B, H, W]` labels.
pub fn one_hot(labels: &[usize], batch: usize, classes: usize, height: usize, width: usize) -> Result<Tensor> {
    let hw = height * width;
    if labels.len() != batch * hw {
        return Err(Error::dim("one_hot", &[labels.len()], &[batch, height, width]));
    }
    let mut data = vec![0.0; batch * classes * hw];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Domain(format!("label {l} out of range for {classes} classes")));
        }
        let (b, p) = (i / hw, i % hw);
        data[(b * classes + l) * hw + p] = 1.0;
    }
    Tensor::new(&[batch, classes, height, width], data)
}

fn check_truth(g: &Graph, x: Var, truth: &Tensor, op: &'static str) -> Result<()> {
    if g.shape(x) != truth.shape() {
        return Err(Error::dim(op, g.shape(x), truth.shape()));
    }
    if g.shape(x).len() < 2 {
        return Err(Error::shape(op, "expected [B, C, ...]"));
    }
    if truth.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Domain(format!("{op}: truth must be one-hot 0/1")));
    }
    Ok(())
}

/// Mean over classes of the soft Dice coefficient. Accepts any `p` in
/// `[0, 1]`, so hard predictions reproduce the Dice score.
pub fn soft_dice(g: &mut Graph, probs: Var, truth: &Tensor) -> Result<Var> {
    check_truth(g, probs, truth, "soft_dice")?;
    let t = g.constant(truth);
    let pt = g.mul(probs, t)?;
    let inter = g.channel_sum(pt)?;
    let p_sum = g.channel_sum(probs)?;
    let t_sum = g.channel_sum(t)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_EPS);
    let den = g.add(p_sum, t_sum)?;
    let den = g.add_scalar(den, DICE_EPS);
    let dice = g.div(num, den)?;
    Ok(g.mean(dice))
}

/// BCE + (1 - soft Dice) on probabilities strictly inside `(0, 1)`.
pub fn seg_loss(g: &mut Graph, probs: Var, truth: &Tensor) -> Result<Var> {
    check_truth(g, probs, truth, "seg_loss")?;
    if let Some(p) = g.value(probs).iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(format!("seg_loss: probability {p} outside (0, 1)")));
    }
    let t = g.constant(truth);
    let one_minus_t = g.constant(&Tensor::from_fn(truth.shape(), |i| 1.0 - truth.data()[i]));
    let ln_p = g.ln(probs);
    let neg = g.scale(probs, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let ln_q = g.ln(q);
    let a = g.mul(t, ln_p)?;
    let b = g.mul(one_minus_t, ln_q)?;
    let ll = g.add(a, b)?;
    let ll = g.mean(ll);
    let bce = g.scale(ll, -1.0);
    finish(g, bce, probs, truth)
}

/// [`seg_loss`] of `sigmoid(logits)`, with the BCE term computed as
/// `softplus(x) - t·x` so saturated logits stay finite.
pub fn seg_loss_logits(g: &mut Graph, logits: Var, truth: &Tensor) -> Result<Var> {
    check_truth(g, logits, truth, "seg_loss")?;
    let t = g.constant(truth);
    let sp = g.softplus(logits);
    let tx = g.mul(t, logits)?;
    let bce = g.sub(sp, tx)?;
    let bce = g.mean(bce);
    let probs = g.sigmoid(logits);
    finish(g, bce, probs, truth)
}

fn finish(g: &mut Graph, bce: Var, probs: Var, truth: &Tensor) -> Result<Var> {
    let dice = soft_dice(g, probs, truth)?;
    let l = g.sub(bce, dice)?;
    Ok(g.add_scalar(l, 1.0))
}
