//! Named trainable parameters and non-trainable buffers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// A non-trainable tensor updated in place (e.g. running statistics).
pub type Buffer = Arc<Mutex<Tensor>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_out)`, fan-out = out_channels * kernel area.
    HeFanOut,
    Const(f64),
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    inner: Mutex<Inner>,
}

struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Buffer>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            inner: Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn buffers(&self) -> Vec<(String, Buffer)> {
        let inner = self.inner.lock().unwrap();
        inner.buffers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().params.get(name).cloned()
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if inner.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; count],
            Init::HeFanOut => {
                let fan_out = shape[0] * shape[2..].iter().product::<usize>();
                let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..count).map(|_| normal.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        inner.params.insert(name, var);
        Ok(tensor)
    }

    fn create_buffer(&self, name: String, shape: &[usize], value: f64) -> Result<Buffer> {
        let mut inner = self.inner.lock().unwrap();
        if inner.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer {name}")));
        }
        let t = Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?;
        let buf = Arc::new(Mutex::new(t));
        inner.buffers.insert(name, buf.clone());
        Ok(buf)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn param(&self, leaf: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.name(leaf), shape, init)
    }

    pub fn buffer(&self, leaf: &str, shape: &[usize], value: f64) -> Result<Buffer> {
        self.store.create_buffer(self.name(leaf), shape, value)
    }

    /// Overwrites an existing parameter in place.
    pub fn assign(&self, leaf: &str, value: &Tensor) -> Result<()> {
        let name = self.name(leaf);
        let var = self
            .store
            .get(&name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.store.dtype)?)?;
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
