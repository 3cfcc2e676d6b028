use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// One named parameter tensor plus its AdamW moment state and freeze flag.
#[derive(Clone, Debug)]
pub struct ParamGroup<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub frozen: bool,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

impl<F: Scalar> ParamGroup<F> {
    fn new(name: String, tensor: Tensor<F>, frozen: bool) -> Self {
        let m = Tensor::zeros(tensor.shape());
        let v = Tensor::zeros(tensor.shape());
        ParamGroup { name, tensor, frozen, m, v }
    }
}

/// All model parameters, keyed by dotted path. BTreeMap keeps every
/// iteration (updates, checkpoints, hashing) in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    groups: BTreeMap<String, ParamGroup<F>>,
    /// optimizer step counter, shared across groups
    pub step: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { groups: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) {
        self.groups.insert(name.to_string(), ParamGroup::new(name.to_string(), tensor, false));
    }

    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor<F>) {
        self.groups.insert(name.to_string(), ParamGroup::new(name.to_string(), tensor, true));
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup<F>> {
        self.groups.get(name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup<F>> {
        self.groups.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<F> {
        &self.groups.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamGroup<F>)> {
        self.groups.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.keys().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.groups.values().map(|g| g.tensor.len()).sum()
    }

    /// Set the freeze flag on every group whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, g) in self.groups.iter_mut() {
            if name.starts_with(prefix) {
                g.frozen = frozen;
            }
        }
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for g in self.groups.values_mut() {
            g.frozen = frozen;
        }
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.groups.iter().filter(|(_, g)| g.frozen).map(|(n, _)| n.clone()).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.groups.iter().filter(|(_, g)| !g.frozen).map(|(n, _)| n.clone()).collect()
    }

    pub fn convert<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        out.step = self.step;
        for (name, g) in &self.groups {
            let mut ng = ParamGroup::new(name.clone(), g.tensor.convert(), g.frozen);
            ng.m = g.m.convert();
            ng.v = g.v.convert();
            out.groups.insert(name.clone(), ng);
        }
        out
    }
}

/// Deterministic weight initializers. All randomness flows through the
/// caller-provided ChaCha stream so a seed fixes every bit of the model.
pub struct Init;

impl Init {
    /// Gaussian with the given std.
    pub fn normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Gaussian scaled by 1/sqrt(fan_in) for linear maps.
    pub fn linear<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
        Self::normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn zeros<F: Scalar>(shape: &[usize]) -> Tensor<F> {
        Tensor::zeros(shape)
    }

    pub fn ones<F: Scalar>(shape: &[usize]) -> Tensor<F> {
        Tensor::filled(shape, F::ONE)
    }

    /// Uniform in [lo, hi).
    pub fn uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(rng.random_range(lo..hi))).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }
}
