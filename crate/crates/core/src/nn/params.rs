use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Uniform weight initialization, scaled for what follows the layer so the
/// signal keeps its variance through deep stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Followed by LeakyReLU: variance `2 / ((1 + a^2) fan_in)`.
    Rectified,
    /// Nothing rectifying follows (embeddings, end of a residual branch,
    /// the output layer): variance `1 / fan_in`.
    Linear,
}

impl Init {
    pub fn bound(self, fan_in: usize) -> f64 {
        let fan_in = fan_in.max(1) as f64;
        match self {
            Init::Rectified => {
                (6.0 / ((1.0 + super::LEAKY_SLOPE * super::LEAKY_SLOPE) * fan_in)).sqrt()
            }
            Init::Linear => (3.0 / fan_in).sqrt(),
        }
    }
}

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±bound`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, Tensor::uniform(shape.to_vec(), -bound, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces every value, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {}: expected {:?}, got {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    v.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Binds a store's parameters onto a tape, lazily, once per parameter.
pub struct ParamBinding<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s, T: Scalar> ParamBinding<'s, T> {
    /// `trainable = false` records parameters as constants, so no gradient
    /// is accumulated for them (gradients still flow to other inputs).
    pub fn new(store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Uses already-recorded vars in place of the stored values.
    pub fn from_vars(store: &'s ParamStore<T>, vars: &[Var]) -> Self {
        debug_assert_eq!(vars.len(), store.len());
        Self {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| {
            let value = self.store.values[id.0].clone();
            if self.trainable {
                tape.leaf(value)
            } else {
                tape.constant(value)
            }
        })
    }

    /// Gradients after `tape.backward`, indexed like the store. Parameters
    /// that were never bound get zeros.
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(v, value)| {
                v.and_then(|v| tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()))
            })
            .collect()
    }
}
