//! Named parameter tensors and initialization helpers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Ordered name -> tensor map holding every trainable parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, data: Vec<f64>) {
        debug_assert_eq!(shape.len(), data.len());
        debug_assert!(!self.entries.contains_key(name), "duplicate param {name}");
        self.entries.insert(name.to_string(), Tensor { shape, data });
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Register this parameter on a tape and return its node.
    pub fn var(&self, tape: &Tape, name: &str) -> Var {
        let t = self.get(name);
        tape.param(name, &t.data, t.shape)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|t| t.data.len()).sum()
    }

    /// Bitwise equality of a subset of parameters (by name prefix exclusion).
    pub fn bit_identical_except(&self, other: &ParamStore, except_prefix: &str) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().all(|(name, t)| {
            if name.starts_with(except_prefix) {
                return true;
            }
            match other.entries.get(name) {
                Some(o) => o.data == t.data,
                None => false,
            }
        })
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid_state(format!(
                    "parameter {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian init with the given standard deviation (Box-Muller on the seeded
/// stream, so runs are reproducible).
pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

pub fn ones(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

/// Identity matrix data for an n x n weight.
pub fn identity(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = 1.0;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_roundtrip_and_var() {
        let mut store = ParamStore::new();
        store.insert("a.w", Shape::Vec(3), vec![1.0, 2.0, 3.0]);
        let tape = Tape::new();
        let v = store.var(&tape, "a.w");
        assert_eq!(tape.value(v), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn bit_identity_check_respects_prefix() {
        let mut a = ParamStore::new();
        a.insert("x.w", Shape::Vec(1), vec![1.0]);
        a.insert("y.w", Shape::Vec(1), vec![2.0]);
        let mut b = a.clone();
        assert!(a.bit_identical_except(&b, "y."));
        b.get_mut("y.w").data[0] = 9.0;
        assert!(a.bit_identical_except(&b, "y."));
        assert!(!a.bit_identical_except(&b, "x."));
    }

    #[test]
    fn normal_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(normal(&mut r1, 8, 0.3), normal(&mut r2, 8, 0.3));
    }
}
