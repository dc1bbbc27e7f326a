use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Initialization scheme for a named parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))` with `fan_in = shape[0]`.
    FanIn,
    /// Xavier/Glorot uniform over `[fan_in, fan_out]`.
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Param {
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Ordered, uniquely named parameters plus Adam moment state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    step: u64,
    params: IndexMap<String, Param>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            step: 0,
            params: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Creates a parameter; the draw depends only on the store seed and the name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::FanIn => {
                let bound = (1.0 / shape.first().copied().unwrap_or(1).max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
            Init::Xavier => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
            Init::Normal(std) => Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            }),
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                m: zeros.clone(),
                v: zeros,
            },
        );
        Ok(())
    }

    pub(crate) fn insert_with_state(&mut self, name: &str, param: Param) {
        self.params.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    /// Mutable access to a value; moment state is left untouched.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub(crate) fn iter_state(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, p)| (k.as_str(), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
                .collect(),
        }
    }

    /// One Adam update with bias correction. Every parameter needs a gradient.
    pub fn adam_step(&mut self, grads: &IndexMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        let missing: Vec<String> = self
            .params
            .keys()
            .filter(|k| !grads.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradient(missing));
        }
        for (name, p) in &self.params {
            let g = &grads[name];
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name}")))
    }

    /// Substitutes an existing parameter with another variable, e.g. a gradcheck leaf.
    pub fn replace(&mut self, name: &str, var: Var<'t>) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::InvalidInput(format!("unknown parameter {name}"))),
        }
    }

    /// Collects gradients for every bound parameter (zeros where unreached).
    pub fn grads(&self, tape: &Tape) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
