//! Named parameter storage and seeded initialisation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<R = f32> {
    pub name: String,
    pub value: Tensor<R>,
    pub trainable: bool,
}

/// Flat list of named tensors. Models hold [`ParamId`]s into a store, so the
/// same model layout can be evaluated against an `f32` store or its `f64`
/// shadow copy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R = f32> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>, trainable: bool) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name: name.to_string(), value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    /// Copies values from `other` for every name present in both stores.
    /// Returns the number of tensors copied.
    pub fn load_values(&mut self, other: &ParamStore<R>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Gaussian tensor with the given standard deviation.
pub fn normal<R: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("finite std");
    let data = (0..n).map(|_| R::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Uniform tensor on `[-bound, bound]`.
pub fn uniform<R: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    use rand::Rng as _;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| R::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}
