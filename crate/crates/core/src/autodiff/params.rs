use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Named trainable tensors with gradient and Adam moment buffers, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

/// Gradients collected from one tape, indexed like the store they came from.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub(crate) fn add(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let (idx, _) = self.entries.insert_full(name, ParamEntry::new(value));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set_value",
                format!("{name}: {:?} vs {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds collected gradients into the `grad` buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (e, g) in self.entries.values_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}
