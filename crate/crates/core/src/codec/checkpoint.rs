//! safetensors checkpoints carrying the model config as metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use super::model::VariantModel;
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "model_config";
const KEY_DTYPE: &str = "dtype";

/// Header contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub format_version: String,
    pub config: ModelConfig,
    pub dtype: DType,
    /// `(name, shape)` sorted by name.
    pub tensors: Vec<(String, Vec<usize>)>,
}

impl CheckpointInfo {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn parse_dtype(s: &str) -> Option<DType> {
    match s {
        "f32" => Some(DType::F32),
        "f64" => Some(DType::F64),
        _ => None,
    }
}

pub fn save_checkpoint(model: &VariantModel, path: &Path) -> Result<()> {
    let config = serde_json::to_string(model.config())
        .map_err(|e| ckpt_err(path, format!("cannot serialize config: {e}")))?;
    let metadata = HashMap::from([
        (KEY_VERSION.to_string(), FORMAT_VERSION.to_string()),
        (KEY_CONFIG.to_string(), config),
        (KEY_DTYPE.to_string(), model.dtype().as_str().to_string()),
    ]);
    let tensors: Vec<(String, candle_core::Tensor)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata))
        .map_err(|e| ckpt_err(path, e))?;
    let bytes = canonical_header(bytes).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rewrites the JSON header with sorted keys so equal models give equal files.
fn canonical_header(bytes: Vec<u8>) -> std::result::Result<Vec<u8>, String> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte length prefix")) as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| format!("bad header: {e}"))?;
    let mut text = serde_json::to_vec(&header).map_err(|e| e.to_string())?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::AssetNotFound {
            path: path.to_path_buf(),
            hint: "checkpoint file does not exist".into(),
        },
        _ => Error::io(path, e),
    })
}

fn header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(ModelConfig, DType, SafeTensors<'a>, String)> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = meta
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata header"))?;
    let version = meta
        .get(KEY_VERSION)
        .ok_or_else(|| ckpt_err(path, "no format_version"))?
        .clone();
    if version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format_version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get(KEY_CONFIG)
            .ok_or_else(|| ckpt_err(path, "no model_config"))?,
    )
    .map_err(|e| ckpt_err(path, format!("bad model_config: {e}")))?;
    let dtype = meta
        .get(KEY_DTYPE)
        .and_then(|s| parse_dtype(s))
        .ok_or_else(|| ckpt_err(path, "missing or unsupported dtype"))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e))?;
    Ok((config, dtype, st, version))
}

/// Reads the header without building a model.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let bytes = read_bytes(path)?;
    let (config, dtype, st, format_version) = header(path, &bytes)?;
    let mut tensors: Vec<(String, Vec<usize>)> = st
        .tensors()
        .into_iter()
        .map(|(n, v)| (n, v.shape().to_vec()))
        .collect();
    tensors.sort();
    Ok(CheckpointInfo {
        format_version,
        config,
        dtype,
        tensors,
    })
}

/// Rebuilds the model described by the checkpoint and loads its weights.
///
/// With `expected`, a config that differs from the stored one is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<VariantModel> {
    let bytes = read_bytes(path)?;
    let (config, dtype, st, _) = header(path, &bytes)?;
    if let Some(want) = expected {
        if want != &config {
            return Err(ckpt_err(
                path,
                format!("stored config {config:?} does not match expected {want:?}"),
            ));
        }
    }
    let model = VariantModel::build(&config, dtype)?;
    let params = model.named_parameters();
    let mut stored: Vec<String> = st.names().into_iter().map(String::from).collect();
    stored.sort();
    let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
    if stored.iter().collect::<Vec<_>>() != names {
        return Err(ckpt_err(path, "tensor names do not match the architecture"));
    }
    for (name, var) in &params {
        let t = st
            .tensor(name)
            .map_err(|e| ckpt_err(path, e))?
            .load(&Device::Cpu)?;
        if t.dims() != var.dims() {
            return Err(ckpt_err(
                path,
                format!("{name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
            ));
        }
        var.set(&t.to_dtype(dtype)?)?;
    }
    Ok(model)
}
