//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform with negative slope √5: uniform in `±1/√fan_in`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations under a dotted prefix.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    prefix: String,
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn push(&mut self, name: &str, shape: impl Into<Vec<usize>>, init: Init) {
        let name = self.full_name(name);
        self.specs.push(ParamSpec { name, shape: shape.into(), init });
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope(&mut self, name: &str, f: impl FnOnce(&mut Self)) {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        f(self);
        self.prefix = saved;
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) {
        self.scope(name, |b| {
            b.push("weight", [cout, cin_per_group, k, k], Init::KaimingUniform { fan_in: cin_per_group * k * k });
            b.push("bias", [cout], Init::Zeros);
        });
    }

    /// Dense layer stored as `[din, dout]` so `x·W` maps the last axis.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.scope(name, |b| {
            b.push("weight", [din, dout], Init::KaimingUniform { fan_in: din });
            b.push("bias", [dout], Init::Zeros);
        });
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.scope(name, |b| {
            b.push("gamma", [d], Init::Ones);
            b.push("beta", [d], Init::Zeros);
        });
    }
}

/// The full learnable state of a model, keyed by dotted path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::KaimingUniform { fan_in } => {
                    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
                }
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            let tensor = Tensor::new(spec.shape.clone(), data)?;
            if tensors.insert(spec.name.clone(), tensor).is_some() {
                return Err(Error::Config(vec![format!("duplicate parameter {}", spec.name)]));
            }
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
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

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zeroes every parameter whose name ends with one of `suffixes`.
    pub fn zero_matching(&mut self, suffixes: &[&str]) {
        for (name, t) in &mut self.tensors {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bindings {
        Bindings {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameter name to tape variable.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { vars: &self.vars, prefix: String::new() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// A prefix view into [`Bindings`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    vars: &'a BTreeMap<String, Var>,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope { vars: self.vars, prefix: self.join(name) }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let full = self.join(name);
        self.vars.get(&full).copied().ok_or(Error::MissingParam(full))
    }
}

/// `x·W + b` using `name.weight` / `name.bias` from `scope`.
pub fn apply_linear<T: Real>(tape: &mut Tape<T>, scope: &Scope, name: &str, x: Var) -> Result<Var> {
    let s = scope.sub(name);
    tape.linear(x, s.get("weight")?, Some(s.get("bias")?))
}

pub fn apply_conv<T: Real>(
    tape: &mut Tape<T>,
    scope: &Scope,
    name: &str,
    x: Var,
    padding: usize,
    groups: usize,
) -> Result<Var> {
    let s = scope.sub(name);
    tape.conv2d(x, s.get("weight")?, Some(s.get("bias")?), padding, groups)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn apply_layer_norm<T: Real>(tape: &mut Tape<T>, scope: &Scope, name: &str, x: Var) -> Result<Var> {
    let s = scope.sub(name);
    tape.layer_norm(x, s.get("gamma")?, s.get("beta")?, LAYER_NORM_EPS)
}
