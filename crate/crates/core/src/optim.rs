//! SGD with momentum, weight decay, and per-group learning-rate multipliers.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Optimizer hyperparameters. Group multipliers are keyed by the first
/// dot-separated segment of a parameter name (e.g. "stem" scales every
/// "stem.*" parameter); the map defaults to empty, i.e. multiplier 1.
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub base_lr: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub group_multipliers: BTreeMap<String, f32>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            group_multipliers: BTreeMap::new(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One named tensor of a model: trainable parameter or running buffer.
#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named collection of model tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn ids(&self) -> HashSet<u64> {
        self.entries.iter().map(|e| e.tensor.id()).collect()
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Total number of scalar values across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// SGD optimizer holding one velocity buffer per trainable parameter.
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<u64, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: HashMap::new(),
        })
    }

    /// One update: g' = grad + wd*w; v <- momentum*v + g'; w <- w - lr_group*v,
    /// with lr_group = epoch_lr * group multiplier. Gradients are left intact;
    /// the caller zeroes them between steps.
    pub fn step(&mut self, params: &ParamSet, epoch_lr: f32) -> Result<()> {
        let wd = self.config.weight_decay;
        let mom = self.config.momentum;
        for e in params.trainable() {
            let mult = self
                .config
                .group_multipliers
                .get(group_of(&e.name))
                .copied()
                .unwrap_or(1.0);
            let lr = epoch_lr * mult;
            let v = self
                .velocity
                .entry(e.tensor.id())
                .or_insert_with(|| vec![0.0; e.tensor.numel()]);
            let mut d = e.tensor.borrow_mut();
            let data = &mut *d;
            let grad = data
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(e.name.clone()))?;
            for i in 0..data.values.len() {
                let g = grad[i] + wd * data.values[i];
                v[i] = mom * v[i] + g;
                data.values[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Spec-level entry point: one SGD step over `params`.
pub fn sgd_step(optimizer: &mut Sgd, params: &ParamSet, epoch_lr: f32) -> Result<()> {
    optimizer.step(params, epoch_lr)
}
