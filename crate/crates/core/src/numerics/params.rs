use std::collections::HashMap;

use rand::Rng;

use super::NumArray;
use crate::error::{Error, Result};

/// Handle to a parameter held by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable parameters. Names are stable slash-separated paths and are
/// what checkpoints key on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NumArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, since that is always
    /// a wiring bug in model construction.
    pub fn add(&mut self, name: impl Into<String>, mut value: NumArray) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        value.set_requires_grad(true);
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NumArray::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &NumArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NumArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &NumArray)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Overwrites the value of `name`, keeping the registered shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != shape {
            return Err(Error::dim(format!(
                "parameter {name}: stored shape {:?}, loaded shape {:?}",
                slot.shape(),
                shape
            )));
        }
        if data.len() != slot.len() {
            return Err(Error::dim(format!("parameter {name}: wrong value count")));
        }
        slot.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.values.iter_mut().for_each(NumArray::zero_grad);
    }

    /// Name of the first parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, _, v)| !v.is_finite()).map(|(_, n, _)| n)
    }
}

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> NumArray {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    NumArray::matrix(rows, cols, data)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> NumArray {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    NumArray::matrix(rows, cols, data)
}
