use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint;
use crate::error::{arg_err, Result, TensorError};
use crate::float::Float;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<E: Float> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Float> {
    params: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

/// Parameters of a store registered as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<E: Float> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return arg_err(format!("duplicate parameter name {name:?}"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// Per-parameter gradients in store order, zero-filled where the loss
    /// does not reach a parameter.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<E>) -> Vec<Tensor<E>> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<F: Float>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor<E>)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        checkpoint::save(path, &entries)
    }

    /// Replaces every parameter from a checkpoint holding exactly this
    /// store's names and shapes.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load::<E>(path)?;
        if loaded.len() != self.params.len() {
            return Err(TensorError::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (name, t) in loaded {
            let id = self
                .id(&name)
                .ok_or_else(|| TensorError::Format(format!("unknown parameter {name:?} in checkpoint")))?;
            self.set(id, t)?;
        }
        Ok(())
    }
}
