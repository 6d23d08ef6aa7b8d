//! Named differentiable parameters and seeded initializers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map of name -> differentiable tensor. Iteration order is
/// lexicographic, which makes checkpoints and optimizer sweeps
/// deterministic.
#[derive(Clone, Default)]
pub struct ParameterSet<S: Scalar> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> std::fmt::Debug for ParameterSet<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(k, v)| (k, v.dims())))
            .finish()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Optim("parameter name must be nonempty".into()));
        }
        if !t.requires_grad() {
            return Err(Error::Optim(format!(
                "parameter `{name}` must require gradients"
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Optim(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Optim(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Swap in a new tensor for an existing name (same shape).
    pub fn replace(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let old = self.get(name)?;
        if old.dims() != t.dims() {
            return Err(Error::Optim(format!(
                "replace `{name}`: shape {:?} vs {:?}",
                old.dims(),
                t.dims()
            )));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear_grads(&self) {
        for t in self.entries.values() {
            t.clear_grad();
        }
    }

    /// Total number of scalar elements.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Names matching a dotted prefix, e.g. `frontend.`.
    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }
}

/// Uniform init on [-a, a] with Xavier/Glorot scaling.
pub fn xavier_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, dims, -a, a)
}

pub fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.random_range(lo..hi)))
        .collect();
    Tensor::param(dims, data)
}

pub fn zeros_param<S: Scalar>(dims: &[usize]) -> Tensor<S> {
    let n: usize = dims.iter().product();
    Tensor::param(dims, vec![S::ZERO; n])
}

pub fn ones_param<S: Scalar>(dims: &[usize]) -> Tensor<S> {
    let n: usize = dims.iter().product();
    Tensor::param(dims, vec![S::ONE; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("b.x", zeros_param(&[2])).unwrap();
        ps.insert("a.y", zeros_param(&[2])).unwrap();
        assert!(ps.insert("a.y", zeros_param(&[2])).is_err());
        assert!(ps.insert("", zeros_param(&[2])).is_err());
        assert_eq!(ps.names(), vec!["a.y".to_string(), "b.x".to_string()]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Tensor<f64> = xavier_uniform(&mut r1, &[3, 3], 3, 3);
        let b: Tensor<f64> = xavier_uniform(&mut r2, &[3, 3], 3, 3);
        assert_eq!(a.data(), b.data());
    }
}
