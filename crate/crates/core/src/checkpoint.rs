//! Model checkpoints: a JSON manifest naming every tensor plus one flat
//! little-endian binary blob in canonical parameter order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{layout, TensorInfo};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: Precision,
    pub data: String,
    pub model: ModelConfig,
    pub scene_ids: Vec<String>,
    /// Rendered-density to density-map factor used in training, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rendered_density_scale: Option<f64>,
    /// Offsets and lengths count elements, not bytes.
    pub tensors: Vec<TensorInfo>,
}

/// Blob path stored next to a manifest: `x.json` -> `x.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub rendered_density_scale: Option<f64>,
}

pub fn encode_checkpoint(
    model: &Model,
    dtype: Precision,
    data_name: &str,
    rendered_density_scale: Option<f64>,
) -> (String, Vec<u8>) {
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype,
        data: data_name.to_string(),
        model: model.config.clone(),
        scene_ids: model.scene_volumes.iter().map(|s| s.id.clone()).collect(),
        rendered_density_scale,
        tensors: layout(model),
    };
    let flat = model.flatten();
    let blob = match dtype {
        Precision::F32 => flat.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Precision::F64 => flat.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    (text, blob)
}

/// Writes `path` (manifest) and its `.bin` sibling.
pub fn save_checkpoint(path: &Path, model: &Model, dtype: Precision) -> Result<()> {
    write_checkpoint(path, model, dtype, None)
}

pub fn write_checkpoint(
    path: &Path,
    model: &Model,
    dtype: Precision,
    rendered_density_scale: Option<f64>,
) -> Result<()> {
    let bin = blob_path(path);
    let name = bin
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (text, blob) = encode_checkpoint(model, dtype, &name, rendered_density_scale);
    std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Ok(read_checkpoint(path)?.model)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", manifest.version)));
    }
    manifest
        .model
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut model = Model::zeros(&manifest.model, &manifest.scene_ids);
    if layout(&model) != manifest.tensors {
        return Err(Error::format(path, "tensor table does not match the model config"));
    }
    let bin = path.with_file_name(&manifest.data);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n = model.parameter_count();
    let width = manifest.dtype.bytes();
    if bytes.len() != n * width {
        return Err(Error::format(
            &bin,
            format!("expected {} bytes, found {}", n * width, bytes.len()),
        ));
    }
    let flat: Vec<f64> = match manifest.dtype {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&bin, "non-finite parameter"));
    }
    model.unflatten(&flat);
    Ok(Checkpoint {
        model,
        rendered_density_scale: manifest.rendered_density_scale,
    })
}
