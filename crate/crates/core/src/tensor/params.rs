use super::{Tensor, TensorError};
use crate::prelude::*;
use crate::rng::SimRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
    /// Running statistics and similar state are stored as non-trainable parameters.
    pub trainable: bool,
}

/// Owner of every parameter of a model. Layers hold `ParamId`s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut SimRng,
    ) -> ParamId {
        let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
        let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut SimRng,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sum gradients from another store with identical layout, e.g. a data-parallel shard.
    pub fn merge_grads(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        if other.params.len() != self.params.len() {
            return Err(TensorError::Shape {
                op: "merge_grads",
                left: (self.params.len(), 0),
                right: (other.params.len(), 0),
            });
        }
        for (i, p) in other.params.iter().enumerate() {
            if let Some(g) = &p.grad {
                self.accumulate_grad(ParamId(i), g);
            }
        }
        Ok(())
    }

    /// Flattened values of every parameter, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        let total = self.num_scalars();
        if flat.len() != total {
            return Err(TensorError::Shape {
                op: "load_flat",
                left: (total, 1),
                right: (flat.len(), 1),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.data().len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}
