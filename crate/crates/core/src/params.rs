//! Named parameter arrays split into the registration and classification groups.

use std::collections::HashMap;

use deepfrc_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Warp network weights.
    Registration,
    /// Classifier weights.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("parameter shape is consistent")
    }
}

/// Ordered parameter collection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, group: Group, shape: &[usize], data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "{name}: shape/data mismatch"
        );
        assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            data,
        });
    }

    /// Uniform in `±bound`.
    pub fn push_uniform(&mut self, rng: &mut impl Rng, name: &str, group: Group, shape: &[usize], bound: f64) {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, group, shape, data);
    }

    pub fn push_constant(&mut self, name: &str, group: Group, shape: &[usize], value: f64) {
        let len = shape.iter().product();
        self.push(name, group, shape, vec![value; len]);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Parameters as graph inputs keyed by name.
    pub fn feed(&self, into: &mut HashMap<String, Tensor>) {
        for p in &self.params {
            into.insert(p.name.clone(), p.tensor());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `other` has the same names, groups and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(CoreError::Config("parameter count differs".into()));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.group != b.group || a.shape != b.shape {
                return Err(CoreError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}
