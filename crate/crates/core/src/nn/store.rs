use crate::error::{MocError, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Handle to one named parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Rebuilds a handle from a slot index (gradient lists and optimizer
    /// state are indexed the same way as the store itself).
    pub fn from_index(index: usize) -> Self {
        Self(index)
    }
}

#[derive(Debug, Clone)]
struct Slot<F: Scalar> {
    name: String,
    value: Tensor<F>,
}

/// Flat registry of named trainable tensors.
///
/// Slots keep their creation order, which makes optimizer sweeps and
/// checkpoint layouts deterministic run to run.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    slots: Vec<Slot<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    /// Register a parameter. Names must be unique; construction code controls
    /// them, so a clash is a programming error.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(
            self.by_name(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.slots.push(Slot { name: name.to_string(), value });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(MocError::Shape(format!(
                "parameter {:?} has shape {:?}, refusing to overwrite with {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.slots[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Iterate `(id, name, value)` in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (ParamId(i), s.name.as_str(), &s.value))
    }

    /// Total number of scalar parameters across all slots.
    pub fn total_params(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}
