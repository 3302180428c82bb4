//! Ordered, named parameter registry and its initializers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = true;
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Places every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(Tensor::new(t.shape(), t.data().to_vec()).expect("valid"), true))
                .collect(),
        }
    }

    /// Adds the tape's leaf gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, S>) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            match v.grad() {
                Some(g) => t.accumulate_grad(g.data())?,
                None => t.accumulate_grad(&vec![S::zero(); t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Parameters placed on one tape, indexed by [`ParamId`].
pub struct Bound<'t, S: Scalar> {
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    /// Wraps variables already on a tape, in registry order.
    pub fn from_vars(vars: Vec<Var<'t, S>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, S> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }
}

/// Scoped parameter factory: names are dotted paths under a prefix.
pub struct Init<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> Init<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_, S> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let path = self.path(leaf);
        self.store.add(path, Tensor::full(shape, S::of(value))?)
    }

    /// Normal(0, std²) resampled until within two standard deviations.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..len)
            .map(|_| loop {
                let z: f64 = normal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break S::of(z * std);
                }
            })
            .collect();
        let path = self.path(leaf);
        self.store.add(path, Tensor::new(shape, data)?)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| S::of(self.rng.random_range(-bound..=bound)))
            .collect();
        let path = self.path(leaf);
        self.store.add(path, Tensor::new(shape, data)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn names_are_unique_and_scoped() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng);
        let mut enc = init.sub("enc");
        let mut blk = enc.sub(0);
        blk.constant("gamma", &[4], 1.0).unwrap();
        assert!(blk.constant("gamma", &[4], 1.0).is_err());
        assert_eq!(store.name(ParamId(0)), "enc.0.gamma");
        assert_eq!(store.numel(), 4);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let id = Init::new(&mut store, &mut rng)
            .trunc_normal("w", &[1000], 0.02)
            .unwrap();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.04));
    }
}
