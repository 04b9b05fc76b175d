//! Named parameter store with deterministic, order-independent init.
//!
//! Every trainable parameter and persistent buffer (batch-norm running
//! statistics, fixed embeddings) lives in one [`ParamStore`] keyed by a
//! dotted name whose first segment is the parameter group (`seg.`, `auth.`,
//! `den.`, `cond.`, `sdf.`). Initial values are drawn from a per-parameter
//! ChaCha substream keyed by the hash of the name, so adding or reordering
//! layers never perturbs the init of existing ones.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VeinError};
use crate::rng::{hash_name, substream, Stream};

/// Initialization scheme for a parameter.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, sqrt(2 / fan_in)) — for conv/linear followed by ReLU-like.
    KaimingNormal { fan_in: usize },
    /// Uniform(±sqrt(6 / (fan_in + fan_out))).
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Explicit initial values (row-major); length must match the shape.
    Fixed(Vec<f64>),
}

struct Entry {
    var: Var,
    trainable: bool,
}

/// Registry of all model state, trainable or not.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    master_seed: u64,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(dtype: DType, master_seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            master_seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn sample(&self, name: &str, shape: &[usize], init: Init) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut rng = substream(self.master_seed, Stream::ParamInit, &[hash_name(name)]);
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid normal");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("valid normal");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            Init::Fixed(values) => {
                assert_eq!(values.len(), n, "Init::Fixed length mismatch for {name}");
                values
            }
        }
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(VeinError::invariant(format!(
                "parameter {name} registered twice"
            )));
        }
        let values = self.sample(name, shape, init);
        let t = Tensor::from_vec(values, shape, &self.device)
            .and_then(|t| t.to_dtype(self.dtype))?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.entries.insert(
            name.to_string(),
            Entry {
                var,
                trainable,
            },
        );
        Ok(tensor)
    }

    /// Register a trainable parameter and return its live tensor handle.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, true)
    }

    /// Register a non-trainable buffer (running stats, constants that must
    /// be checkpointed) and return its live tensor handle.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, false)
    }

    /// Live tensor handle of an existing entry.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .get(name)
            .map(|e| e.var.as_tensor().clone())
            .ok_or_else(|| VeinError::invariant(format!("unknown parameter {name}")))
    }

    /// Clone of an entry's `Var` (shares storage with the live tensor).
    pub fn var(&self, name: &str) -> Result<Var> {
        self.entries
            .get(name)
            .map(|e| e.var.clone())
            .ok_or_else(|| VeinError::invariant(format!("unknown parameter {name}")))
    }

    /// Overwrite an entry's value in place (used for buffers and loading).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| VeinError::invariant(format!("unknown parameter {name}")))?;
        entry.var.set(value)?;
        Ok(())
    }

    /// All entry names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Trainable `(name, var)` pairs whose name starts with any prefix,
    /// sorted by name.
    pub fn trainable_with_prefixes(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(name, e)| e.trainable && prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    /// Every entry as `(name, tensor, trainable)` for checkpointing.
    pub fn snapshot(&self) -> Vec<(String, Tensor, bool)> {
        self.entries
            .iter()
            .map(|(name, e)| (name.clone(), e.var.as_tensor().clone(), e.trainable))
            .collect()
    }

    /// Load values for every entry from `values`; keys must cover the store
    /// exactly (missing or unknown keys are errors), shapes must match.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for key in values.keys() {
            if !self.entries.contains_key(key) {
                return Err(VeinError::checkpoint(format!(
                    "checkpoint has unknown parameter {key}"
                )));
            }
        }
        for (name, entry) in &self.entries {
            let value = values.get(name).ok_or_else(|| {
                VeinError::checkpoint(format!("checkpoint missing parameter {name}"))
            })?;
            if value.dims() != entry.var.dims() {
                return Err(VeinError::checkpoint(format!(
                    "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                    value.dims(),
                    entry.var.dims()
                )));
            }
            entry.var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
