//! Single-file checkpoints: a safetensors archive whose tensors are the
//! parameters, batch-norm buffers and Adam moments, with a JSON header (format
//! version, epoch, optimizer step, RNG stream, config snapshot) stored under
//! the `header` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{config_err, data_err, Error, Result};
use crate::nn::VarStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "header";
const GROUPS: [&str; 4] = ["param", "buffer", "adam_m", "adam_v"];

/// Every random draw in epoch `e` comes from a generator seeded with
/// `(global_seed, e)`, so this pair is the complete RNG state between epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub global_seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    adam_step: u64,
    n_classes: usize,
    rng: RngState,
    config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub n_classes: usize,
    pub rng: RngState,
    pub config: RunConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return config_err(format!("cannot checkpoint {other:?} tensors")),
    })
}

fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return data_err(format!("unexpected checkpoint dtype {other:?}")),
    };
    Ok(t)
}

impl Checkpoint {
    fn groups(&self) -> [&BTreeMap<String, Tensor>; 4] {
        [&self.params, &self.buffers, &self.adam_m, &self.adam_v]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut encoded = Vec::new();
        for (group, map) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in map {
                let (dtype, bytes) = tensor_bytes(t)?;
                encoded.push((format!("{group}/{name}"), dtype, t.dims().to_vec(), bytes));
            }
        }
        let views = encoded
            .iter()
            .map(|(name, dtype, shape, bytes)| Ok((name.as_str(), TensorView::new(*dtype, shape.clone(), bytes)?)))
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch: self.epoch,
            adam_step: self.adam_step,
            n_classes: self.n_classes,
            rng: self.rng,
            config: self.config.clone(),
        };
        let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
        Ok(safetensors::serialize(views, Some(meta))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes)?;
        let Some(text) = meta.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) else {
            return data_err("checkpoint has no header");
        };
        let header: Header = serde_json::from_str(text)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: header.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        header.config.validate()?;
        let st = SafeTensors::deserialize(bytes)?;
        let mut maps: [BTreeMap<String, Tensor>; 4] = Default::default();
        for (full, view) in st.tensors() {
            let Some((group, name)) = full.split_once('/') else {
                return data_err(format!("unexpected checkpoint entry {full}"));
            };
            let Some(g) = GROUPS.iter().position(|x| *x == group) else {
                return data_err(format!("unexpected checkpoint group {group}"));
            };
            maps[g].insert(name.to_string(), tensor_from_view(&view)?);
        }
        let [params, buffers, adam_m, adam_v] = maps;
        Ok(Self {
            epoch: header.epoch,
            adam_step: header.adam_step,
            n_classes: header.n_classes,
            rng: header.rng,
            config: header.config,
            params,
            buffers,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Snapshot of a store's parameters and buffers.
pub fn store_state(vs: &VarStore) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
    let snap = |m: &BTreeMap<String, candle_core::Var>| -> Result<BTreeMap<String, Tensor>> {
        m.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    };
    Ok((snap(vs.params())?, snap(vs.buffers())?))
}

/// Overwrite a store's variables with saved tensors. Names, shapes and dtypes
/// must match exactly.
pub fn restore_store(vs: &VarStore, params: &BTreeMap<String, Tensor>, buffers: &BTreeMap<String, Tensor>) -> Result<()> {
    for (what, live, saved) in [("parameter", vs.params(), params), ("buffer", vs.buffers(), buffers)] {
        if live.len() != saved.len() || live.keys().any(|k| !saved.contains_key(k)) {
            return data_err(format!("checkpoint {what} names do not match the model"));
        }
        for (name, var) in live {
            let t = &saved[name];
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return data_err(format!(
                    "{what} {name}: checkpoint has {:?} {:?}, model has {:?} {:?}",
                    t.dims(),
                    t.dtype(),
                    var.dims(),
                    var.dtype()
                ));
            }
            var.set(t)?;
        }
    }
    Ok(())
}
