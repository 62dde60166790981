use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named tensors kept in lexicographic name order, which is also the order
/// used by the optimizer and the checkpoint writer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Largest elementwise difference; `None` when the name sets or shapes differ.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Option<f64> {
        if self.shapes() != other.shapes() {
            return None;
        }
        Some(
            self.entries
                .values()
                .zip(other.entries.values())
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0, f64::max),
        )
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        let (a, b) = (self.shapes(), other.shapes());
        if a == b {
            return Ok(());
        }
        let missing = a.keys().find(|k| !b.contains_key(*k));
        let extra = b.keys().find(|k| !a.contains_key(*k));
        let reshaped = a.iter().find(|(k, s)| b.get(*k).is_some_and(|t| t != *s));
        let detail = match (missing, extra, reshaped) {
            (Some(k), _, _) => format!("missing tensor {k}"),
            (_, Some(k), _) => format!("unexpected tensor {k}"),
            (_, _, Some((k, s))) => format!("tensor {k} has shape {:?}, expected {s:?}", b[k]),
            _ => unreachable!(),
        };
        Err(Error::ShapeMismatch(detail))
    }

    /// Put every tensor on `tape`, as differentiable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// He-normal initialization: N(0, 2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_errors_name_the_tensor() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros(&[2]));
        let mut b = a.clone();
        b.insert("x", Tensor::zeros(&[3]));
        let err = a.check_layout(&b).unwrap_err().to_string();
        assert!(err.contains("tensor x"), "{err}");
        assert!(a.check_layout(&a.clone()).is_ok());
        assert_eq!(a.max_abs_diff(&b), None);
    }
}
