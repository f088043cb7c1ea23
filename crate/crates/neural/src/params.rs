use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NeuralError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters with accumulated gradients, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NeuralError::InvalidArgument {
                op: "param",
                detail: format!("duplicate parameter name {name}"),
            });
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Registers a parameter drawn from `uniform(-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds per-parameter gradients produced by a backward pass.
    pub fn accumulate(&mut self, grads: &[Option<Tensor<T>>]) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.grad.shape() {
                    return shape_err("accumulate", format!("{} gradient {:?}", p.name, g.shape()));
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return shape_err(
                "set_value",
                format!("{} expects {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            );
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
