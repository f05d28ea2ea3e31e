//! Named, ordered storage for trainable tensors.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in insertion order. Names are stable and used as checkpoint keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Inserts every parameter into `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<F>, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Gradients of the bound leaves, zero-filled where none reached a parameter.
    pub fn collect_grads(&self, g: &Graph<F>, vars: &[Var]) -> Vec<Tensor<F>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| {
                g.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Uniform `[-bound, bound]` initialization.
pub fn uniform<F: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::c(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated buffer")
}
