//! Named parameter matrices and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Matrix::len).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    /// Collects the gradient of every bound parameter; unreached parameters get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.value(v).dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Normal init scaled by `1/sqrt(fan_in)`.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_shape_simple_fn((fan_in, fan_out), || {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    })
}

pub fn zeros_row(n: usize) -> Matrix {
    Matrix::zeros((1, n))
}
