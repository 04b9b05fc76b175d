//! Single-file checkpoints: every parameter and buffer of the model, the
//! optimizer moments, and the run metadata in one safetensors archive.
//!
//! Tensor bytes are stored verbatim (little-endian), so a save → load cycle
//! reproduces values bit-exactly. Scalars travel in the safetensors
//! metadata map as strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Result, VeinError};
use crate::tensor::{AdamW, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";

/// Run state carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Epochs completed so far (pretraining counts).
    pub epoch: usize,
    /// Master seed; every rng stream is re-derived from it, so this is the
    /// complete rng state.
    pub seed: u64,
    pub adamw_step: usize,
    pub n_classes: usize,
    /// Mean total loss of every epoch trained so far.
    pub loss_history: Vec<f64>,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            let v: Vec<f32> = flat.to_vec1()?;
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F32, bytes))
        }
        DType::F64 => {
            let v: Vec<f64> = flat.to_vec1()?;
            let mut bytes = Vec::with_capacity(v.len() * 8);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F64, bytes))
        }
        other => Err(VeinError::checkpoint(format!(
            "unsupported checkpoint dtype {other:?}"
        ))),
    }
}

fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let dtype = match view.dtype() {
        Dtype::F32 => DType::F32,
        Dtype::F64 => DType::F64,
        other => {
            return Err(VeinError::checkpoint(format!(
                "unsupported tensor dtype {other:?} in checkpoint"
            )))
        }
    };
    Ok(Tensor::from_raw_buffer(
        view.data(),
        dtype,
        view.shape(),
        &Device::Cpu,
    )?)
}

/// Write the checkpoint file (parent directories are created).
pub fn save(
    path: &Path,
    store: &ParamStore,
    opt: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut raw: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::new();
    for (name, tensor, _trainable) in store.snapshot() {
        let (dtype, bytes) = tensor_bytes(&tensor)?;
        raw.push((name, tensor.dims().to_vec(), dtype, bytes));
    }
    if let Some(opt) = opt {
        for (name, m, v) in opt.state() {
            let (dm, bm) = tensor_bytes(&m)?;
            raw.push((format!("{OPT_M}{name}"), m.dims().to_vec(), dm, bm));
            let (dv, bv) = tensor_bytes(&v)?;
            raw.push((format!("{OPT_V}{name}"), v.dims().to_vec(), dv, bv));
        }
    }
    let views: Vec<(&str, TensorView<'_>)> = raw
        .iter()
        .map(|(name, shape, dtype, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| VeinError::checkpoint(format!("bad tensor view for {name}: {e}")))
        })
        .collect::<Result<_>>()?;

    let history: Vec<String> = meta.loss_history.iter().map(|v| v.to_string()).collect();
    let metadata: HashMap<String, String> = [
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("epoch".to_string(), meta.epoch.to_string()),
        ("seed".to_string(), meta.seed.to_string()),
        ("adamw_step".to_string(), meta.adamw_step.to_string()),
        ("n_classes".to_string(), meta.n_classes.to_string()),
        ("loss_history".to_string(), history.join(",")),
        ("rng".to_string(), format!("keyed:{}", meta.seed)),
    ]
    .into();

    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| VeinError::checkpoint(format!("serialize {}: {e}", path.display())))?;
    Ok(())
}

fn meta_field<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
) -> Result<T> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| VeinError::checkpoint(format!("metadata field {key} missing or invalid")))
}

/// Read only the metadata block (cheap; used to size the model before a
/// full load).
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let buffer = std::fs::read(path).map_err(|e| VeinError::Dataset {
        path: path.to_path_buf(),
        msg: format!("cannot read checkpoint: {e}"),
    })?;
    let (_, metadata) = SafeTensors::read_metadata(&buffer)
        .map_err(|e| VeinError::checkpoint(format!("parse {}: {e}", path.display())))?;
    let map = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| VeinError::checkpoint("checkpoint has no metadata block"))?;
    let version: u32 = meta_field(map, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(VeinError::checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let history_raw = map
        .get("loss_history")
        .ok_or_else(|| VeinError::checkpoint("metadata field loss_history missing"))?;
    let loss_history = history_raw
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| VeinError::checkpoint(format!("bad loss_history entry {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(CheckpointMeta {
        epoch: meta_field(map, "epoch")?,
        seed: meta_field(map, "seed")?,
        adamw_step: meta_field(map, "adamw_step")?,
        n_classes: meta_field(map, "n_classes")?,
        loss_history,
    })
}

/// Load a checkpoint into an existing store (and optionally the optimizer).
/// The store's entry set must match the file exactly.
pub fn load_into(
    path: &Path,
    store: &ParamStore,
    opt: Option<&mut AdamW>,
) -> Result<CheckpointMeta> {
    let meta = read_meta(path)?;
    let buffer = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&buffer)
        .map_err(|e| VeinError::checkpoint(format!("parse {}: {e}", path.display())))?;

    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (name, view) in st.tensors() {
        let tensor = tensor_from_view(&view)?;
        if let Some(base) = name.strip_prefix(OPT_M) {
            moments.entry(base.to_string()).or_default().0 = Some(tensor);
        } else if let Some(base) = name.strip_prefix(OPT_V) {
            moments.entry(base.to_string()).or_default().1 = Some(tensor);
        } else {
            params.insert(name, tensor);
        }
    }
    store.load(&params)?;

    if let Some(opt) = opt {
        let mut state = Vec::with_capacity(moments.len());
        for (name, (m, v)) in moments {
            let (Some(m), Some(v)) = (m, v) else {
                return Err(VeinError::checkpoint(format!(
                    "optimizer moments for {name} are incomplete"
                )));
            };
            state.push((name, m, v));
        }
        opt.load_state(meta.adamw_step, state)?;
    }
    Ok(meta)
}
