//! Named parameter collections.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use std::collections::HashMap;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the row count.
    UniformFanIn,
    Zeros,
}

/// Draw a freshly initialized tensor.
pub fn init_params(rows: usize, cols: usize, scheme: InitScheme, rng: &mut Rng) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(rows, cols),
        InitScheme::UniformFanIn => {
            let a = 1.0 / (rows as f64).sqrt();
            let values = (0..rows * cols).map(|_| rng.range(-a, a)).collect();
            Tensor::from_vec(rows, cols, values).expect("init shape")
        }
    }
}

/// Ordered map of named parameter tensors.
///
/// Iteration order is insertion order, which fixes the optimizer state
/// layout and the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        tensor.enable_grad();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.ensure_finite(name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme_is_all_zero() {
        let mut rng = Rng::new(1);
        let t = init_params(4, 4, InitScheme::Zeros, &mut rng);
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_in_init_is_deterministic() {
        let a = init_params(4, 16, InitScheme::UniformFanIn, &mut Rng::new(99));
        let b = init_params(4, 16, InitScheme::UniformFanIn, &mut Rng::new(99));
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn fan_in_bounds_and_mean() {
        // U(-a, a) with a = 1/sqrt(fan_in); sample mean of n draws should sit
        // within 3 sigma / sqrt(n) of zero.
        let rows = 100;
        let cols = 1000;
        let t = init_params(rows, cols, InitScheme::UniformFanIn, &mut Rng::new(7));
        let a = 1.0 / (rows as f64).sqrt();
        assert!(t.values().iter().all(|v| v.abs() < a));
        let n = (rows * cols) as f64;
        let mean = t.values().iter().sum::<f64>() / n;
        let sigma = a / 3.0f64.sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
    }

    #[test]
    fn store_preserves_insertion_order_and_counts() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::zeros(1, 3));
        store.insert("a", Tensor::zeros(2, 2));
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(store.param_count(), 7);
        assert!(store.get("a").unwrap().requires_grad());
    }
}
