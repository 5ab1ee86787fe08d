//! Named trainable parameters with gradient accumulators and Adam moments.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }
}

/// Ordered parameter map. Iteration order is lexicographic by name, which
/// fixes the checkpoint byte layout and any reduction order over parameters.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
    /// Adam step counter, shared by every parameter.
    pub step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    /// Inserts a tensor drawn uniformly from `[-s, s]`, `s = 1/sqrt(fan_in)`.
    ///
    /// The stream is seeded from `seed` and the parameter name, so the same
    /// parameter gets the same initial value no matter which other
    /// parameters exist.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-s..=s)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("valid init shape"));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.grad.len() != g.len() {
            return Err(Error::dim("accumulate_grad", p.grad.shape(), g.shape()));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// Squared L2 norm of every parameter value.
    pub fn l2_norm_sq(&self) -> f64 {
        self.params.values().map(|p| p.value.sum_squares()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// FNV-1a, used only to decorrelate per-parameter init streams.
fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_bounded_and_independent_of_siblings() {
        let mut a = ParameterStore::new();
        a.init_uniform("w", &[4, 9], 9, 7);
        let mut b = ParameterStore::new();
        b.init_uniform("other", &[3], 3, 7);
        b.init_uniform("w", &[4, 9], 9, 7);
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
        assert!(a.value("w").unwrap().data().iter().all(|v| v.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn grad_shape_matches_value() {
        let mut s = ParameterStore::new();
        s.init_uniform("w", &[2, 3], 3, 1);
        assert_eq!(s.grad("w").unwrap().shape(), s.value("w").unwrap().shape());
        assert!(s.accumulate_grad("w", &Tensor::zeros(&[5])).is_err());
    }
}
