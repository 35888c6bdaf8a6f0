//! Named, ordered parameter storage.
//!
//! Modules hold [`ParamId`]s; a forward pass binds the whole store onto a
//! graph in insertion order and reads gradients back in the same order.

use std::ops::Index;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Substitutes another graph value for one parameter, e.g. to probe a
    /// single parameter with finite differences.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `[-bound, bound)` draws in row-major order.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut SeededRng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.uniform(-bound, bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t)).collect())
    }

    /// Adds each parameter's graph gradient into its stored gradient.
    /// Parameters that were not reached get an explicit zero gradient.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match g.grad(v) {
                Some(gr) => t.accumulate_grad(gr)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter layout differs".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim("load_values", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_follow_insertion_order() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::ones(&[2]));
        let b = s.add("b", Tensor::ones(&[3]));
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let y = g.sum(bound[b]);
        g.backward(y).unwrap();
        s.accumulate_grads(&g, &bound).unwrap();
        assert_eq!(s.get(a).grad().unwrap(), &[0.0, 0.0]);
        assert_eq!(s.get(b).grad().unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.name(b), "b");
        assert_eq!(s.numel(), 5);
    }
}
