//! Named trainable parameters and their gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{MqError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

/// Ordered collection of parameters. Insertion order is the canonical order
/// used by the optimizer and the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(MqError::arg(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let gradient = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            gradient,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    /// Adds a gradient set (e.g. from one backward pass) into the stored
    /// gradients.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.gradient.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn gradients(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| Some(p.gradient.clone())).collect())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.gradient.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.norm()))
            .collect()
    }
}

/// Per-parameter gradients produced by one backward pass; `None` where the
/// parameter did not take part in the computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Option<Tensor>>);

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients(vec![None; n])
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    /// Fixed-order merge: `self += other`.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Glorot-uniform sample on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(s.id("w"), Some(ParamId(0)));
    }

    #[test]
    fn gradient_matches_value_shape() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(s.get(id).gradient.shape(), &[3, 4]);
    }

    #[test]
    fn glorot_within_limit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = glorot_uniform(&[10, 20], 10, 20, &mut rng);
        let lim = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= lim));
    }
}
