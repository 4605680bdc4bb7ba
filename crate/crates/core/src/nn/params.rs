use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// Index of a parameter tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order. Names are canonical and
/// stable; checkpoints and transfer manifests key on them.
#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    /// True for tensors that weight decay applies to (weights, not biases
    /// or normalization parameters).
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.decay.push(decay);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn by_name(&self, name: &str) -> Option<(&Tensor<f32>, ParamId)> {
        self.index.get(name).map(|&i| (&self.tensors[i], ParamId(i)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient tensors aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradSet {
    grads: Vec<Tensor<f32>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<f32>) {
        self.grads[id.0].add_assign(grad);
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.grads
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter_finite())
    }
}

/// He-normal initializer with a deterministic per-parameter stream: the seed
/// is mixed with the registration ordinal, so identical configs and seeds
/// give identical parameters regardless of construction interleaving.
pub struct Initializer {
    seed: u64,
    counter: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let mixed = crate::training::seeds::mix(&[self.seed, 0x9e37_79b9, self.counter]);
        self.counter += 1;
        ChaCha8Rng::seed_from_u64(mixed)
    }

    /// He-normal weight tensor: std = sqrt(2 / fan_in).
    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        let mut rng = self.next_rng();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
        )
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor<f32> {
        self.counter += 1;
        Tensor::zeros(shape)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor<f32> {
        self.counter += 1;
        Tensor::full(shape, 1.0)
    }
}
