//! Named, ordered parameter storage shared by every learnable component.

use serde::{Deserialize, Serialize};

use crate::error::{MsmfError, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Weight with `N(0, gain / fan_in)` entries.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let std = (gain / fan_in as f64).sqrt();
        self.add(name, rng.normal_tensor(shape, std))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.tensor)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Sum of squared entries over every tensor.
    pub fn squared_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.tensor.sum_squares()).sum()
    }

    /// Binds every tensor as a trainable leaf, in storage order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.param(e.tensor.clone())).collect()
    }

    /// Binds every tensor as a constant (inference only).
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries.clone()
    }

    /// Replaces values from `loaded`, which must match names and shapes exactly.
    pub fn assign_from(&mut self, loaded: Vec<NamedTensor>) -> Result<()> {
        if loaded.len() != self.entries.len() {
            return Err(MsmfError::Data(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                loaded.len()
            )));
        }
        for (slot, nt) in self.entries.iter_mut().zip(loaded) {
            if slot.name != nt.name || slot.tensor.shape() != nt.tensor.shape() {
                return Err(MsmfError::Data(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    slot.name,
                    slot.tensor.shape(),
                    nt.name,
                    nt.tensor.shape()
                )));
            }
            slot.tensor = nt.tensor;
        }
        Ok(())
    }

    /// Overwrites all values; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(MsmfError::Dimension(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (slot, t) in self.entries.iter_mut().zip(tensors) {
            slot.tensor.expect_same_shape(&t, &slot.name)?;
            slot.tensor = t;
        }
        Ok(())
    }
}
