//! Plain parameter storage, detached from any computation graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// A dense row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} does not hold {} values",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Array) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named parameter arrays in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Array>,
}

pub type Grads = BTreeMap<String, Vec<f64>>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.entries.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Checks that `other` has exactly the same names and shapes, reporting the
    /// first tensor (in name order) that differs.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) | (None, Some((name, _))) => {
                    return Err(Error::Layout {
                        name: name.clone(),
                        detail: "present in only one parameter set".into(),
                    })
                }
                (Some((na, xa)), Some((nb, xb))) => {
                    if na != nb {
                        let name = na.min(nb).clone();
                        return Err(Error::Layout {
                            name,
                            detail: "present in only one parameter set".into(),
                        });
                    }
                    if xa.shape() != xb.shape() {
                        return Err(Error::Layout {
                            name: na.clone(),
                            detail: format!("shape {:?} vs {:?}", xa.shape(), xb.shape()),
                        });
                    }
                }
            }
        }
    }

    /// Wraps every array as a graph leaf; `trainable` decides which leaves
    /// accumulate gradients.
    pub fn leaves(&self, trainable: impl Fn(&str) -> bool) -> Leaves {
        let tensors = self
            .entries
            .iter()
            .map(|(name, array)| {
                let t = if trainable(name) {
                    Tensor::param(array)
                } else {
                    Tensor::constant_from(array)
                };
                (name.clone(), t)
            })
            .collect();
        Leaves { tensors }
    }
}

/// Graph leaves built from a [`ParamSet`] for one forward/backward pass.
#[derive(Clone)]
pub struct Leaves {
    tensors: BTreeMap<String, Tensor>,
}

impl Leaves {
    /// Panics if `name` is not a parameter; layouts are fixed by the config.
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Gradients of every leaf that has one.
    pub fn grads(&self) -> Grads {
        self.tensors
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}
