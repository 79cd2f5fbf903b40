//! Named, seeded parameter storage.
//!
//! Trainable parameters and non-trainable buffers (batch-norm running
//! statistics) live in separate maps keyed by dotted path. Initialization
//! draws from a seeded ChaCha stream so models are reproducible.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
    /// Explicit row-major values.
    Values(Vec<f64>),
}

struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> Vec<(String, Var)> {
        let g = self.inner.lock().expect("param lock");
        g.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        let g = self.inner.lock().expect("param lock");
        g.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every parameter and buffer, keyed by name (buffers get a
    /// `buffer:` prefix).
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in self.params() {
            out.insert(k, v.as_tensor().clone());
        }
        for (k, v) in self.buffers() {
            out.insert(format!("buffer:{k}"), v.as_tensor().clone());
        }
        out
    }

    /// Overwrites parameters and buffers from a snapshot. Every stored entry
    /// must be present with an identical shape.
    pub fn load_state(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut targets = self.params();
        targets.extend(self.buffers().into_iter().map(|(k, v)| (format!("buffer:{k}"), v)));
        for (name, var) in &targets {
            let t = state
                .get(name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "`{name}`: checkpoint shape {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = state.keys().find(|k| !targets.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Shape(format!("checkpoint has unknown entry `{extra}`")));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
}

impl Builder {
    pub fn pp(&self, name: &str) -> Builder {
        Builder {
            store: self.store.clone(),
            prefix: self.path(name),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn param<S: Into<Shape>>(&self, name: &str, shape: S, init: Init) -> Result<Var> {
        let shape = shape.into();
        let n = shape.elem_count();
        let path = self.path(name);
        let mut g = self.store.inner.lock().expect("param lock");
        if g.params.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter `{path}`")));
        }
        let values: Vec<f64> = match init {
            Init::Uniform(b) => (0..n).map(|_| g.rng.random_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Shape(format!("`{path}`: {} init values for {n} slots", v.len())));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        g.params.insert(path, var.clone());
        Ok(var)
    }

    pub fn buffer<S: Into<Shape>>(&self, name: &str, shape: S, value: f64) -> Result<Var> {
        let path = self.path(name);
        let t = Tensor::full(value, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store
            .inner
            .lock()
            .expect("param lock")
            .buffers
            .insert(path, var.clone());
        Ok(var)
    }
}
