//! Named parameter storage and the AdamW optimizer.
//!
//! Parameters live outside any tape. Each training step binds them onto a
//! fresh tape as leaves, runs forward/backward, then applies the collected
//! leaf gradients back here. Iteration order is insertion order, which is
//! fixed by model construction, so updates and checkpoints are deterministic.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::mathx;
use crate::rng::Prng;
use crate::tensor::{numel, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// AdamW first and second moments.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) {
        assert_eq!(numel(&shape), value.len(), "param {name}: bad shape");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        self.index.insert(String::from(name), self.entries.len());
        self.entries.push(Param {
            name: String::from(name),
            shape,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
    }

    /// Zero-initialized parameter.
    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n = numel(&shape);
        self.insert(name, shape, vec![0.0; n]);
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Prng) {
        let n = numel(&shape);
        let value: Vec<f64> = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        self.insert(name, shape, value);
    }

    /// Xavier-normal init for a `[fan_in, fan_out]` weight.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Prng) {
        let std = mathx::sqrt(2.0 / (fan_in + fan_out) as f64);
        self.insert_normal(name, vec![fan_in, fan_out], std, rng);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn tensor(&self, name: &str) -> Tensor {
        let p = self.get(name);
        Tensor::new(p.shape.clone(), p.value.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Parameters bound onto one tape as leaves, in store order.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: BTreeMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars: Vec<Var<'t>> = store
            .entries
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.value.clone()))
            .collect();
        Bound {
            vars,
            index: store.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Leaf gradients in store order, read after a backward pass.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
        }
    }

    /// Apply one update with gradients in store order. `lr_scale` implements
    /// warmup without mutating the base learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr_scale: f64) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - mathx::powf(self.beta1, t);
        let bc2 = 1.0 - mathx::powf(self.beta2, t);
        let lr = self.lr * lr_scale;
        for (p, g) in store.entries.iter_mut().zip(grads) {
            assert_eq!(p.value.len(), g.len(), "gradient size mismatch for {}", p.name);
            for i in 0..p.value.len() {
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g[i];
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = p.m[i] / bc1;
                let vh = p.v[i] / bc2;
                p.value[i] -= lr * (mh / (mathx::sqrt(vh) + self.eps) + self.weight_decay * p.value[i]);
            }
        }
    }
}

/// Shared training-loop options (optimizer schedule and batching).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 2.5e-5,
            warmup_epochs: 50,
        }
    }
}

impl TrainOptions {
    /// Linear warmup factor for the given epoch.
    pub fn warmup_factor(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            (((epoch + 1) as f64) / self.warmup_epochs as f64).min(1.0)
        }
    }
}

/// Deterministic in-place Fisher-Yates shuffle.
pub fn shuffle(items: &mut [usize], rng: &mut Prng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
