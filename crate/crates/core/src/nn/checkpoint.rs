//! Checkpoints: a JSON manifest plus one raw little-endian f32 payload that
//! concatenates each layer's weights then biases in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Layer, LayerKind, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub id: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub weight_len: usize,
    pub bias_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: NetworkConfig,
    pub seed: u64,
    pub step: u64,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub seed: u64,
    pub step: u64,
}

fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save(path: &Path, params: &NetworkParams<f32>, seed: u64, step: u64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pp = payload_path(path);
    let manifest = Manifest {
        config: params.config().clone(),
        seed,
        step,
        payload: pp
            .file_name()
            .expect("payload has a file name")
            .to_string_lossy()
            .into_owned(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerEntry {
                id: l.id.clone(),
                kind: l.kind,
                cin: l.cin,
                cout: l.cout,
                weight_len: l.weight.len(),
                bias_len: l.bias.len(),
            })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(params.param_count() * 4);
    for l in &params.layers {
        for v in l.weight.iter().chain(&l.bias) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&pp, bytes).map_err(|e| Error::io(&pp, e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let pp = path
        .parent()
        .map(|d| d.join(&manifest.payload))
        .unwrap_or_else(|| PathBuf::from(&manifest.payload));
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let expected: usize = manifest.layers.iter().map(|l| l.weight_len + l.bias_len).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{} holds {} bytes, manifest implies {expected}",
            pp.display(),
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let layers = manifest
        .layers
        .iter()
        .map(|e| Layer {
            id: e.id.clone(),
            kind: e.kind,
            cin: e.cin,
            cout: e.cout,
            weight: values.by_ref().take(e.weight_len).collect(),
            bias: values.by_ref().take(e.bias_len).collect(),
        })
        .collect();
    Ok(Checkpoint {
        params: NetworkParams::from_layers(&manifest.config, layers)?,
        seed: manifest.seed,
        step: manifest.step,
    })
}
