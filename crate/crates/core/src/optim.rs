//! SGD with heavy-ball momentum and L2 weight decay:
//!
//! ```text
//! v ← momentum·v + grad + weight_decay·param
//! param ← param − lr·v
//! ```

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (name, v) in [("lr", lr), ("momentum", momentum), ("weight_decay", weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let velocity = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Replaces the momentum buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(Error::Config(format!(
                "{} momentum buffers for {} parameters",
                velocity.len(),
                self.velocity.len()
            )));
        }
        for (new, old) in velocity.iter().zip(&self.velocity) {
            if new.shape() != old.shape() {
                return Err(Error::dim("momentum", new.shape(), old.shape()));
            }
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Updates every parameter from its stored gradient. Parameters without
    /// a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::Contract("optimizer was built for a different store".into()));
        }
        for (p, v) in store.tensors_mut().iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().map(<[f64]>::to_vec);
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                vd[i] = self.momentum * vd[i] + gi + self.weight_decay * pd[i];
                pd[i] -= self.lr * vd[i];
            }
        }
        Ok(())
    }
}
