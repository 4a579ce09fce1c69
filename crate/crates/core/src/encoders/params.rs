use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names, same order, same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Overwrites every tensor from `source` by name; shapes must agree.
    pub fn load_from(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        if source.len() != self.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} parameters, found {}", self.len(), source.len()),
            ));
        }
        for (name, t) in source {
            let id = self
                .id(name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::shape("checkpoint load", self.get(id).shape(), t.shape()));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Euclidean distance between two stores of the same layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameter initialization schemes.
pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, 1.0),
        Init::Normal(std) => {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| dist.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        }
    }
}

/// A tape plus lazy bindings from [`ParamId`]s to tape leaves.
///
/// With `trainable = false` parameters enter as constants and nothing
/// downstream of them records gradients.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Per-parameter gradients, zero for parameters the loss never touched.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .ids()
            .map(|id| match self.bound[id.0] {
                Some(v) => grads
                    .get(v)
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape())),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect()
    }
}
