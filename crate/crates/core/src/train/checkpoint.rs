//! Checkpoints are safetensors files: weights, batch-norm buffers and Adam
//! moments as tensors, run state as JSON in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::network::{DbfNet, ModelConfig};

const META_KEY: &str = "dbfnet";
const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const MOMENT_M: &str = "adam_m/";
const MOMENT_V: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub adam_step: u64,
    pub best_val_dsc: Option<f64>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn from_view(name: &str, view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, net: &DbfNet, adam: Option<&Adam>, meta: &CheckpointMeta) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in net.store().params() {
        entries.push((format!("{PARAM}{name}"), var.as_tensor().clone()));
    }
    for (name, var) in net.store().buffers() {
        entries.push((format!("{BUFFER}{name}"), var.as_tensor().clone()));
    }
    if let Some(adam) = adam {
        for (name, m, v) in adam.moments() {
            entries.push((format!("{MOMENT_M}{name}"), m.clone()));
            entries.push((format!("{MOMENT_V}{name}"), v.clone()));
        }
    }
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = entries
        .into_iter()
        .map(|(n, t)| {
            let (dt, bytes) = to_bytes(&t)?;
            Ok((n, dt, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views = encoded
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write then rename, so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Names the first differing field between two configs, e.g. `ffs.count`.
pub fn config_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Option<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<String> {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                keys.into_iter().find_map(|k| {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, p),
                        _ => Some(p),
                    }
                })
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
                .iter()
                .zip(y)
                .enumerate()
                .find_map(|(i, (u, v))| walk(u, v, format!("{path}[{i}]"))),
            _ => (a != b).then_some(path),
        }
    }
    let a = serde_json::to_value(expected).ok()?;
    let b = serde_json::to_value(found).ok()?;
    walk(&a, &b, String::new())
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing run metadata", path.display())))?;
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name.clone(), from_view(&name, &view)?);
        }
        Ok(Self { meta, tensors })
    }

    /// Fresh model built from the stored config with the stored weights.
    pub fn build_model(&self, dtype: DType) -> Result<DbfNet> {
        let net = DbfNet::new(&self.meta.model, dtype, self.meta.seed)?;
        self.apply(&net)?;
        Ok(net)
    }

    /// Copies weights and buffers into `net`, which must have the same config.
    pub fn apply(&self, net: &DbfNet) -> Result<()> {
        if let Some(field) = config_mismatch(net.config(), &self.meta.model) {
            return Err(Error::Checkpoint(format!("model config mismatch at field `{field}`")));
        }
        let store = net.store();
        for (prefix, names) in [
            (PARAM, store.params().keys().collect::<Vec<_>>()),
            (BUFFER, store.buffers().keys().collect::<Vec<_>>()),
        ] {
            for name in names {
                let t = self
                    .tensors
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                store.assign(name, t)?;
            }
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, adam: &mut Adam) -> Result<()> {
        let collect = |prefix: &str| -> BTreeMap<String, Tensor> {
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        adam.restore(self.meta.adam_step, collect(MOMENT_M), collect(MOMENT_V))
    }
}
