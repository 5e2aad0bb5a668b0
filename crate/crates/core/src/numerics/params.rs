use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors. Names are dotted paths such
/// as `encoder.layer3.attn.q_weight` and are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: IndexMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Register every parameter as a named leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.param(k.clone(), v.clone())))
            .collect();
        Bound { graph, vars }
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g, F: Real> {
    graph: &'g Graph<F>,
    vars: HashMap<String, Var<'g, F>>,
}

impl<'g, F: Real> Bound<'g, F> {
    pub fn get(&self, name: &str) -> Result<Var<'g, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }
}

/// Deterministic parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::lit(std * self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break F::lit(std * z);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a: Tensor<f32> = Init::new(7).trunc_normal(&[64], 0.02);
        let b: Tensor<f32> = Init::new(7).trunc_normal(&[64], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        let c: Tensor<f32> = Init::new(8).trunc_normal(&[64], 0.02);
        assert_ne!(a, c);
    }
}
