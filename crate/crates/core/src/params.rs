//! Named parameter tensors.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±1/sqrt(fan_in) with fan_in = rows.
    FanIn,
    Normal(f64),
}

/// Shape and initializer of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        Self { name: name.into(), shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

/// Parameter tensors keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialize a list of specs with a seeded generator. Specs are visited
    /// in name order so the result does not depend on declaration order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in sorted {
            let value = match spec.init {
                Init::Zeros => Array2::zeros(spec.shape),
                Init::Ones => Array2::ones(spec.shape),
                Init::FanIn => {
                    let bound = 1.0 / (spec.shape.0.max(1) as f64).sqrt();
                    Array2::from_shape_simple_fn(spec.shape, || rng.gen_range(-bound..bound))
                }
                Init::Normal(std) => {
                    let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
                    Array2::from_shape_simple_fn(spec.shape, || rng.sample(normal))
                }
            };
            let prev = tensors.insert(spec.name.clone(), value);
            assert!(prev.is_none(), "duplicate parameter `{}`", spec.name);
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Add `N(0, std²)` noise to every tensor. Test helper for breaking the
    /// zero-initialized symmetry.
    pub fn jitter(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v + rng.sample(normal));
        }
    }
}
