//! Named parameters and the registry that owns them.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
}

/// Registry of every parameter in a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// (trainable, frozen) element counts.
    pub fn count(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.frozen {
                (t, f + p.value.numel())
            } else {
                (t + p.value.numel(), f)
            }
        })
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient buffer. Frozen parameters
    /// are skipped and never get a buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Ok(());
        }
        if grad.len() != p.value.numel() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        match &mut p.grad {
            Some(buf) => {
                for (b, &g) in buf.data_mut().iter_mut().zip(grad) {
                    *b += g;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    /// Checksum over the values of the selected parameters, in registry order.
    pub fn checksum_where(&self, mut keep: impl FnMut(&Parameter<T>) -> bool) -> u64 {
        let mut acc = Vec::new();
        for p in self.params.iter().filter(|p| keep(p)) {
            acc.extend_from_slice(p.name.as_bytes());
            acc.extend_from_slice(&p.value.checksum().to_le_bytes());
        }
        crate::tensor::fnv1a(&acc)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Standard normal truncated to two standard deviations, then scaled.
pub fn truncated_normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::c(z * std);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_params_never_get_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Tensor::zeros(&[2]), true);
        let b = store.register("b", Tensor::zeros(&[2]), false);
        store.accumulate_grad(a, &[1.0, 1.0]).unwrap();
        store.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        store.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        assert!(store.get(a).grad.is_none());
        assert_eq!(store.get(b).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        assert_eq!(store.count(), (2, 2));
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(&[1]), false);
        store.register("w", Tensor::zeros(&[1]), false);
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = truncated_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean: f64 = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }
}
