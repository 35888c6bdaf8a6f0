//! Central-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`
    pub max_rel_err: f64,
}

/// Compares the reverse-mode gradient of the scalar `f` at `x` against
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` for every coordinate.
pub fn fd_report<F>(f: F, x: &Tensor, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("fd_check needs eps > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(FdReport {
        analytic,
        numeric,
        max_rel_err,
    })
}

/// Maximum relative error between the analytic and central-difference
/// gradients of `f` at `x`.
pub fn fd_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    fd_report(f, x, eps).map(|r| r.max_rel_err)
}
