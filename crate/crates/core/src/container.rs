// SPDX-License-Identifier: MIT OR Apache-2.0

//! `VTRACE01` matrix files and the directory layouts built on them.
//!
//! Each file is a 64-byte header of eight little-endian fields (magic,
//! version, rows, cols, layer, view code, checkpoint hash, reserved)
//! followed by the matrix as row-major little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::observation::stable_hash;
use crate::repr_geometry::{CheckpointActivations, RepresentationMatrix, View};

pub const MAGIC: &[u8; 8] = b"VTRACE01";
pub const VERSION: u64 = 1;
pub const HEADER_LEN: usize = 64;
/// View code of tensors that are not pooled activations.
pub const TENSOR_VIEW: u64 = 0xFF;
/// Layer field of tensors that belong to no layer.
pub const NO_LAYER: u64 = u64::MAX;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u64,
    pub rows: u64,
    pub cols: u64,
    pub layer: u64,
    pub view_code: u64,
    pub checkpoint_hash: u64,
}

fn bad(path: &Path, reason: impl Into<String>) -> VtraceError {
    VtraceError::Container {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode(data: ArrayView2<'_, f64>, layer: u64, view_code: u64, checkpoint_hash: u64) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(MAGIC);
    for field in [VERSION, rows as u64, cols as u64, layer, view_code, checkpoint_hash, 0] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Array2<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(path, "missing VTRACE01 magic"));
    }
    let field = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8-byte field"));
    let header = Header {
        version: field(1),
        rows: field(2),
        cols: field(3),
        layer: field(4),
        view_code: field(5),
        checkpoint_hash: field(6),
    };
    if header.version != VERSION {
        return Err(bad(path, format!("unsupported version {}", header.version)));
    }
    let count = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| bad(path, "matrix size overflows"))?;
    if bytes.len() != HEADER_LEN + count * 8 {
        return Err(bad(
            path,
            format!(
                "{}x{} matrix needs {} data bytes, file has {}",
                header.rows,
                header.cols,
                count * 8,
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte value")))
        .collect();
    let data = Array2::from_shape_vec((header.rows as usize, header.cols as usize), values)
        .map_err(|e| bad(path, e.to_string()))?;
    Ok((header, data))
}

pub fn write_matrix(
    path: &Path,
    data: ArrayView2<'_, f64>,
    layer: u64,
    view_code: u64,
    checkpoint_hash: u64,
) -> Result<()> {
    fs::write(path, encode(data, layer, view_code, checkpoint_hash)).map_err(|e| VtraceError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<(Header, Array2<f64>)> {
    let bytes = fs::read(path).map_err(|e| VtraceError::io(path, e))?;
    decode(&bytes, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| VtraceError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| VtraceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| bad(path, e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VtraceError::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationManifest {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub layers: usize,
    pub samples: usize,
    pub feature_dims: BTreeMap<View, usize>,
    /// Hex-encoded.
    pub sample_order_hash: String,
    pub probe_template: Option<String>,
    pub files: Vec<String>,
}

fn activation_file(layer: usize, view: View) -> String {
    format!("layer{layer:03}_{}.vtr", view.as_str())
}

/// Writes one file per (layer, view) plus `manifest.json` into `dir`.
pub fn write_activations(dir: &Path, acts: &CheckpointActivations) -> Result<()> {
    create_dir(dir)?;
    let hash = stable_hash(&acts.checkpoint_id);
    let mut files = Vec::new();
    let mut feature_dims = BTreeMap::new();
    for (layer, views) in acts.layers().iter().enumerate() {
        for (&view, m) in views {
            let name = activation_file(layer, view);
            write_matrix(&dir.join(&name), m.data(), layer as u64, view.code(), hash)?;
            feature_dims.insert(view, m.features());
            files.push(name);
        }
    }
    let manifest = ActivationManifest {
        checkpoint_id: acts.checkpoint_id.clone(),
        dataset_id: acts.dataset_id.clone(),
        layers: acts.num_layers(),
        samples: acts.num_samples(),
        feature_dims,
        sample_order_hash: format!("{:016x}", acts.sample_order_hash),
        probe_template: acts.probe_template.clone(),
        files,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_activations(dir: &Path) -> Result<CheckpointActivations> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: ActivationManifest = read_json(&manifest_path)?;
    let hash = stable_hash(&manifest.checkpoint_id);
    let order = u64::from_str_radix(&manifest.sample_order_hash, 16)
        .map_err(|e| bad(&manifest_path, format!("sample_order_hash: {e}")))?;
    let mut layers = vec![BTreeMap::new(); manifest.layers];
    for name in &manifest.files {
        let path = dir.join(name);
        let (h, data) = read_matrix(&path)?;
        let view =
            View::from_code(h.view_code).ok_or_else(|| bad(&path, format!("unknown view code {}", h.view_code)))?;
        let layer = usize::try_from(h.layer)
            .ok()
            .filter(|&l| l < manifest.layers)
            .ok_or_else(|| {
                bad(
                    &path,
                    format!("layer {} outside the manifest's {} layers", h.layer, manifest.layers),
                )
            })?;
        if h.checkpoint_hash != hash {
            return Err(bad(&path, "checkpoint hash does not match the manifest"));
        }
        if h.rows as usize != manifest.samples || manifest.feature_dims.get(&view) != Some(&(h.cols as usize)) {
            return Err(bad(&path, format!("{}x{} disagrees with the manifest", h.rows, h.cols)));
        }
        let m = RepresentationMatrix::new(data, manifest.checkpoint_id.clone(), layer, view)?;
        layers[layer].insert(view, m);
    }
    if let Some(l) = layers.iter().position(BTreeMap::is_empty) {
        return Err(bad(&manifest_path, format!("no files for layer {l}")));
    }
    let acts = CheckpointActivations::from_matrices(manifest.checkpoint_id, manifest.dataset_id, order, layers)?;
    Ok(match manifest.probe_template {
        Some(t) => acts.with_probe_template(t),
        None => acts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub memorized_patch: Option<usize>,
    pub action_blind_to_language: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_model(dir: &Path, model: &Model, checkpoint_id: &str) -> Result<()> {
    create_dir(dir)?;
    let hash = stable_hash(checkpoint_id);
    let mut tensors = Vec::new();
    for (name, layer, m) in model.tensors() {
        let file = format!("{name}.vtr");
        write_matrix(
            &dir.join(&file),
            m.view(),
            layer.map_or(NO_LAYER, |l| l as u64),
            TENSOR_VIEW,
            hash,
        )?;
        tensors.push(TensorEntry {
            name,
            file,
            layer,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let manifest = ModelManifest {
        kind: model.kind(),
        config: *model.config(),
        memorized_patch: model.memorized_patch(),
        action_blind_to_language: model.action_blind_to_language(),
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest: ModelManifest = read_json(&dir.join(MANIFEST))?;
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let path: PathBuf = dir.join(&t.file);
        let (h, data) = read_matrix(&path)?;
        if h.view_code != TENSOR_VIEW || (h.rows as usize, h.cols as usize) != (t.rows, t.cols) {
            return Err(bad(&path, "header disagrees with the manifest"));
        }
        tensors.insert(t.name.clone(), data);
    }
    Model::from_tensors(
        manifest.config,
        manifest.kind,
        manifest.memorized_patch,
        manifest.action_blind_to_language,
        tensors,
    )
}
