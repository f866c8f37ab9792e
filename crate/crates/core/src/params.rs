//! Named parameter storage with trainable/frozen flags.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    /// Dotted path, e.g. `backbone.stage0.block1.mona_attn.up.weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&Parameter<T>) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.tensor.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Draws initial parameter values into a store under a name prefix.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv/linear default.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<String> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(self.rng));
        self.store.add(name, t, true)?;
        Ok(name.to_string())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f32) -> Result<String> {
        self.store.add(name, Tensor::full(shape.to_vec(), v), true)?;
        Ok(name.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![2]), true).is_err());
    }

    #[test]
    fn counts_follow_filters() {
        let mut s = ParamStore::<f32>::new();
        s.add("x.w", Tensor::zeros(vec![2, 3]), true).unwrap();
        s.add("y.w", Tensor::zeros(vec![4]), false).unwrap();
        assert_eq!(s.total_count(), 10);
        assert_eq!(s.count_where(|p| p.trainable), 6);
        assert_eq!(s.cast::<f64>().count_where(|p| p.name.starts_with('y')), 4);
    }
}
