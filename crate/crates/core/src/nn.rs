//! Named parameter storage and the small layers built on top of the tape.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered store of named parameters. Names are unique and stable; the
/// optimizer keys its state by name, never by position.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar weights whose names start with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Places every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<_>>()?;
        Ok(Bindings(vars))
    }

    /// Gradients by parameter name after `tape.backward`.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bindings) -> HashMap<String, Tensor> {
        self.names
            .iter()
            .zip(&bound.0)
            .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// 64-bit FNV-1a, used to derive per-parameter init streams from names.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Glorot-uniform matrix in `±√(6/(fan_in + fan_out))`, seeded from
/// `(seed, name)` so the draw does not depend on registration order.
pub fn glorot(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(name));
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive fan")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, d_in: usize, d_out: usize) -> Self {
        let wname = format!("{name}.w");
        let w = store.add(wname.clone(), glorot(seed, &wname, d_in, d_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, vars.var(self.w), vars.var(self.b))
    }
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(d: usize) -> Self {
        Self {
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        }
    }

    /// Exponential update with momentum 0.1. The running variance tracks the
    /// unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], batch: usize) {
        let m = kernels::BATCHNORM_MOMENTUM;
        let unbias = batch as f64 / (batch as f64 - 1.0);
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * batch_mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * batch_var[j] * unbias;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the owner's running-statistics table.
    pub state: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, states: &mut Vec<BatchNormState>, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        states.push(BatchNormState::new(d));
        Self {
            gamma,
            beta,
            state: states.len() - 1,
        }
    }

    /// Train mode normalizes by batch statistics and, when `update_stats` is
    /// set, folds them into the running averages.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &Bindings,
        states: &mut [BatchNormState],
        x: Var,
        mode: Mode,
        update_stats: bool,
    ) -> Result<Var> {
        let (g, b) = (vars.var(self.gamma), vars.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm(x, g, b, None)?;
                if update_stats {
                    let rows = tape.value(x).rows();
                    states[self.state].update(&mean, &var, rows);
                }
                Ok(y)
            }
            Mode::Eval => {
                let s = &states[self.state];
                let (y, _, _) = tape.batchnorm(x, g, b, Some((&s.running_mean, &s.running_var)))?;
                Ok(y)
            }
        }
    }
}
