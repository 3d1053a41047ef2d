//! Named parameter and buffer storage.

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Owns every tensor of a model: trainable parameters and non-trainable
/// buffers (running statistics), addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(self.id_of(name).is_none(), "duplicate parameter name {}", name);
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                detail: format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            });
        }
        e.value = value;
        Ok(())
    }

    /// Put a tensor on the tape: trainable parameters become gradient
    /// leaves, buffers become constants.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        if e.trainable {
            tape.param(id, e.value.clone())
        } else {
            tape.constant(e.value.clone())
        }
    }

    /// Put a tensor on the tape as a constant regardless of trainability.
    pub fn bind_frozen(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.constant(self.entries[id.0].value.clone())
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}
