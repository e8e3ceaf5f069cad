use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// A named set of tensors sharing one freeze flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterGroup {
    pub name: String,
    pub trainable: bool,
    pub members: Vec<ParamId>,
}

/// All parameters of a model, partitioned into groups.
///
/// Every tensor belongs to exactly one group; freezing acts on whole groups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    groups: Vec<ParameterGroup>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            groups: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Declares a group; re-declaring an existing group is a no-op.
    pub fn add_group(&mut self, name: &str, trainable: bool) {
        if self.group(name).is_none() {
            self.groups.push(ParameterGroup {
                name: name.to_string(),
                trainable,
                members: Vec::new(),
            });
        }
    }

    pub fn add(&mut self, name: &str, group: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let gi = self
            .groups
            .iter()
            .position(|g| g.name == group)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{group}`")))?;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad: None,
        });
        self.groups[gi].members.push(id);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParameterGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{group}`")))?;
        g.trainable = trainable;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let group = &self.params[id.0].group;
        self.groups
            .iter()
            .find(|g| &g.name == group)
            .is_some_and(|g| g.trainable)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.numel() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has {} entries, tensor has {}",
                p.name,
                grad.len(),
                p.value.numel()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.value.shape(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.iter()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}
