//! Safetensors checkpoints: weights, BN statistics, Adam moments and run metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use bsnet_core::data::PreprocessSpec;
use bsnet_core::losses::LossReport;
use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::network::{Network, NetworkConfig};
use crate::train::{TrainConfig, Trainer};
use crate::{Error, Result};

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const META_KEY: &str = "bsnet";
const FORMAT: &str = "bsnet-checkpoint-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub dtype: DType,
    pub epoch: usize,
    pub adam_step: u64,
    pub train: Option<TrainConfig>,
    pub preprocess: Option<PreprocessSpec>,
    pub history: Vec<LossReport>,
    /// Every stored tensor under its prefixed name.
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn encode(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            shape,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            shape,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn decode(view: &TensorView<'_>, path: &Path, name: &str) -> Result<Tensor> {
    let bytes = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::checkpoint(path, format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

impl Checkpoint {
    /// Weights and statistics only, for inference.
    pub fn from_network(net: &Network) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, var) in net.store().vars() {
            tensors.insert(format!("{PARAM}{name}"), var.as_tensor().clone());
        }
        for (name, buf) in net.store().buffers() {
            let t = buf.lock().expect("buffer lock").clone();
            tensors.insert(format!("{BUFFER}{name}"), t);
        }
        Self {
            network: net.config().clone(),
            dtype: net.dtype(),
            epoch: 0,
            adam_step: 0,
            train: None,
            preprocess: None,
            history: Vec::new(),
            tensors,
        }
    }

    pub fn capture(trainer: &Trainer) -> Self {
        let (net, cfg, spec, adam, epoch, history) = trainer.parts();
        let mut ck = Self::from_network(net);
        let (m, v) = adam.state();
        for (name, t) in m {
            ck.tensors.insert(format!("{ADAM_M}{name}"), t.clone());
        }
        for (name, t) in v {
            ck.tensors.insert(format!("{ADAM_V}{name}"), t.clone());
        }
        ck.epoch = epoch;
        ck.adam_step = adam.steps_taken();
        ck.train = Some(cfg.clone());
        ck.preprocess = Some(*spec);
        ck.history = history.to_vec();
        ck
    }

    /// Writes through a temporary file so an interrupted save leaves the old one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let encoded = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), encode(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let views = encoded
            .iter()
            .map(|(k, (d, s, b))| Ok((k.as_str(), TensorView::new(*d, s.clone(), b).map_err(|e| Error::checkpoint(path, e))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("network".to_string(), json(&self.network));
        meta.insert("fingerprint".to_string(), self.network.fingerprint());
        meta.insert("dtype".to_string(), dtype_name(self.dtype).to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("adam_step".to_string(), self.adam_step.to_string());
        meta.insert("history".to_string(), json(&self.history));
        if let Some(t) = &self.train {
            meta.insert("train".to_string(), json(t));
        }
        if let Some(p) = &self.preprocess {
            meta.insert("preprocess".to_string(), json(p));
        }
        // One key holding a sorted map: the header's own map has no stable order.
        let header = HashMap::from([(META_KEY.to_string(), json(&meta))]);
        let tmp = path.with_extension("safetensors.tmp");
        safetensors::serialize_to_file(views, Some(header), &tmp).map_err(|e| Error::checkpoint(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let meta: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::checkpoint(path, "missing metadata"))
            .and_then(|s| serde_json::from_str(s).map_err(|e| Error::checkpoint(path, format!("bad metadata: {e}"))))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| Error::checkpoint(path, format!("missing `{k}`")));
        let parse = |k: &str, v: &str, e: &dyn std::fmt::Display| Error::checkpoint(path, format!("bad `{k}` ({v}): {e}"));

        if field("format")? != FORMAT {
            return Err(Error::checkpoint(path, "unknown format"));
        }
        let network: NetworkConfig = serde_json::from_str(field("network")?).map_err(|e| parse("network", "json", &e))?;
        if &network.fingerprint() != field("fingerprint")? {
            return Err(Error::checkpoint(path, "network fingerprint does not match its configuration"));
        }
        let dtype = match field("dtype")?.as_str() {
            "f64" => DType::F64,
            "f32" => DType::F32,
            other => return Err(Error::checkpoint(path, format!("unknown dtype {other}"))),
        };
        let epoch = field("epoch")?.parse().map_err(|e| parse("epoch", &meta["epoch"], &e))?;
        let adam_step = field("adam_step")?
            .parse()
            .map_err(|e| parse("adam_step", &meta["adam_step"], &e))?;
        let history = serde_json::from_str(field("history")?).map_err(|e| parse("history", "json", &e))?;
        let train = match meta.get("train") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| parse("train", "json", &e))?),
            None => None,
        };
        let preprocess = match meta.get("preprocess") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| parse("preprocess", "json", &e))?),
            None => None,
        };

        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = decode(&view, path, &name)?;
            tensors.insert(name, t);
        }
        Ok(Self {
            network,
            dtype,
            epoch,
            adam_step,
            train,
            preprocess,
            history,
            tensors,
        })
    }

    /// Builds the network and overwrites every weight and statistic.
    pub fn restore_network(&self) -> Result<Network> {
        let net = Network::new(&self.network, self.dtype, 0)?;
        let missing = |name: &str| Error::Checkpoint {
            path: Default::default(),
            reason: format!("tensor `{name}` is missing"),
        };
        let mut expected = 0;
        for (name, var) in net.store().vars() {
            let key = format!("{PARAM}{name}");
            let t = self.tensors.get(&key).ok_or_else(|| missing(&key))?;
            check_shape(&key, t, var.as_tensor())?;
            var.set(&t.to_dtype(self.dtype)?)?;
            expected += 1;
        }
        for (name, buf) in net.store().buffers() {
            let key = format!("{BUFFER}{name}");
            let t = self.tensors.get(&key).ok_or_else(|| missing(&key))?;
            let mut slot = buf.lock().expect("buffer lock");
            check_shape(&key, t, &slot)?;
            *slot = t.to_dtype(self.dtype)?;
            expected += 1;
        }
        let stored = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(PARAM) || k.starts_with(BUFFER))
            .count();
        if stored != expected {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: format!("{stored} stored tensors for a network with {expected}"),
            });
        }
        Ok(net)
    }

    /// Adam moments keyed by variable name.
    pub fn adam_state(&self, path: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
        let pick = |prefix: &str| -> Result<BTreeMap<String, Tensor>> {
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t)))
                .map(|(n, t)| Ok((n, t.to_dtype(self.dtype)?)))
                .collect()
        };
        let (m, v) = (pick(ADAM_M)?, pick(ADAM_V)?);
        if m.len() != v.len() || (self.adam_step > 0 && m.is_empty()) {
            return Err(Error::checkpoint(path, "incomplete optimizer state"));
        }
        Ok((m, v))
    }
}

fn check_shape(name: &str, got: &Tensor, want: &Tensor) -> Result<()> {
    if got.dims() != want.dims() {
        return Err(Error::Checkpoint {
            path: Default::default(),
            reason: format!("`{name}` has shape {:?}, expected {:?}", got.dims(), want.dims()),
        });
    }
    Ok(())
}

/// Loads a network for inference from any checkpoint.
pub fn load_network(path: &Path) -> Result<Network> {
    Checkpoint::load(path)?.restore_network().map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::checkpoint(path, reason),
        other => other,
    })
}
