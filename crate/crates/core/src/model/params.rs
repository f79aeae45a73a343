use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Handle to one tensor in a [`ModelParams`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Default)]
pub(crate) struct ParamRegistry {
    pub specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }
}

/// Gradient accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(values: &[Tensor]) -> Self {
        Self {
            tensors: values.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }
}

/// Every learnable tensor with its name and gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub grads: Gradients,
}

impl ModelParams {
    /// Deterministic initialisation: one RNG stream seeded by `seed`, consumed
    /// in registration order.
    pub(crate) fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<Tensor> = specs
            .iter()
            .map(|s| {
                let mut t = Tensor::zeros(&s.shape);
                match s.init {
                    Init::Zeros => {}
                    Init::Ones => t.fill(1.0),
                    Init::Normal { std } => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        t.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                    }
                }
                t
            })
            .collect();
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            grads: Gradients::zeros_like(&values),
            values,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub(crate) fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0].data
    }
}
