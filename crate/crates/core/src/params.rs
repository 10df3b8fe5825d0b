use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer grouping. Only `Backbone` is affected by the backbone learning
/// rate multiplier; `Frozen` tensors (text encoder, normalization statistics)
/// never receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Flat registry of every named tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; layer constructors own their prefixes.
    pub fn add(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.to_string(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].group != ParamGroup::Frozen
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let current = &mut self.params[id.0].value;
        if current.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                alloc::format!("{name}: expected {:?}, got {:?}", current.shape(), value.shape()),
            ));
        }
        *current = value;
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Frozen)
            .map(|p| p.value.len())
            .sum()
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// He-normal initialization for a weight with the given fan-in.
pub fn kaiming_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(rng, shape, libm::sqrt(2.0 / fan_in.max(1) as f64))
}
