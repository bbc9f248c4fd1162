use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a trainable array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Index of a non-trainable buffer (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// The four disjoint parameter partitions.
///
/// `GenerativeClass` holds the parameters of the `p(y | z2)` head and
/// `InferenceClass` those of the `q(y | z1, x)` head; these are the only
/// parameters that labelled data may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Generative,
    GenerativeClass,
    Inference,
    InferenceClass,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Generative,
        ParamGroup::GenerativeClass,
        ParamGroup::Inference,
        ParamGroup::InferenceClass,
    ];

    fn bit(self) -> u8 {
        match self {
            ParamGroup::Generative => 1,
            ParamGroup::GenerativeClass => 2,
            ParamGroup::Inference => 4,
            ParamGroup::InferenceClass => 8,
        }
    }

    pub fn is_class_head(self) -> bool {
        matches!(self, ParamGroup::GenerativeClass | ParamGroup::InferenceClass)
    }
}

/// Set of parameter groups that receive gradients in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(15);
    /// Only the two classifier heads.
    pub const CLASS_HEADS: GroupSet = GroupSet(2 | 8);

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }
}

/// Named collection of every trainable array plus batch-norm buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
    buffer_names: Vec<String>,
    buffers: Vec<Array1<F>>,
    buffer_index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
            index: HashMap::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub fn add_param(
        &mut self,
        name: impl Into<String>,
        value: Array2<F>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array1<F>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffer_names.push(name);
        self.buffers.push(value);
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.groups[id.0] == group)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_index.get(name).copied().map(BufferId)
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffer_names[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Array1<F> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Array1<F> {
        &mut self.buffers[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.buffers.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
