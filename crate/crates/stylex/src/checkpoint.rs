//! Versioned checkpoint container.
//!
//! Layout: `"SXCK" | version u32 | meta_len u32 | meta JSON | array count
//! u32` then per array `name_len u16 | name | ndim u8 | dims u32... |
//! f64 LE data`. The JSON metadata carries the component kind, model
//! dimensioning, a config hash, and the frozen flag; loads refuse any
//! dimension mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StylexError};
use crate::models::{ArchConfig, ModelDims};
use crate::nn::Parameterized;

const MAGIC: &[u8; 4] = b"SXCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Component kind, e.g. "cl_extractor", "cvae_encoder".
    pub kind: String,
    pub dims: ModelDims,
    pub arch: ArchConfig,
    pub config_hash: String,
    pub frozen: bool,
    /// Free-form extras (epoch counters, optimizer step, flags).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, arr: ArrayD<f64>) {
        self.arrays.push((name.into(), arr));
    }

    /// Append every parameter of a model under `prefix/`.
    pub fn push_params<M: Parameterized>(&mut self, prefix: &str, model: &M) {
        for p in model.params() {
            self.arrays
                .push((format!("{prefix}/{}", p.name), p.value.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Restore every parameter of a model from `prefix/`, by exact name,
    /// refusing shape mismatches.
    pub fn restore_params<M: Parameterized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        for p in model.params_mut() {
            let key = format!("{prefix}/{}", p.name);
            let arr = self
                .arrays
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, a)| a)
                .ok_or_else(|| {
                    StylexError::Serde(format!("checkpoint missing array {key}"))
                })?;
            if arr.shape() != p.value.shape() {
                return Err(StylexError::Serde(format!(
                    "checkpoint array {key} has shape {:?}, model expects {:?}",
                    arr.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(arr);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(arr.ndim() as u8);
            for &d in arr.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let contiguous;
            let slice = match arr.as_slice() {
                Some(s) => s,
                None => {
                    contiguous = arr.as_standard_layout().to_owned();
                    contiguous.as_slice().unwrap()
                }
            };
            for &v in slice {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| StylexError::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| StylexError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| StylexError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = fs::read(path).map_err(|e| StylexError::io(path, e))?;
        let fail = |reason: String| StylexError::format(path, reason);
        if data.len() < 12 || &data[0..4] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let rd_u32 =
            |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        let version = rd_u32(4);
        if version != VERSION as usize {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = rd_u32(8);
        let mut off = 12;
        if off + meta_len > data.len() {
            return Err(fail("truncated metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&data[off..off + meta_len])?;
        off += meta_len;
        let count = rd_u32(off);
        off += 4;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(data[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            let name = String::from_utf8(data[off..off + name_len].to_vec())
                .map_err(|_| fail("array name is not utf-8".into()))?;
            off += name_len;
            let ndim = data[off] as usize;
            off += 1;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(rd_u32(off));
                off += 4;
            }
            let len: usize = dims.iter().product();
            let mut values = Vec::with_capacity(len);
            if off + 8 * len > data.len() {
                return Err(fail(format!("truncated array {name}")));
            }
            for i in 0..len {
                values.push(f64::from_le_bytes(
                    data[off + 8 * i..off + 8 * (i + 1)].try_into().unwrap(),
                ));
            }
            off += 8 * len;
            arrays.push((
                name,
                ArrayD::from_shape_vec(IxDyn(&dims), values)
                    .map_err(|e| fail(format!("bad array shape: {e}")))?,
            ));
        }
        Ok(Checkpoint { meta, arrays })
    }

    /// Load and verify the stored dimensions against the expected ones.
    pub fn load_expecting(
        path: &Path,
        kind: &str,
        dims: &ModelDims,
        arch: &ArchConfig,
    ) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.meta.kind != kind {
            return Err(StylexError::format(
                path,
                format!("checkpoint kind {:?}, expected {kind:?}", ckpt.meta.kind),
            ));
        }
        if ckpt.meta.dims != *dims || ckpt.meta.arch != *arch {
            return Err(StylexError::format(
                path,
                format!(
                    "checkpoint dims/arch mismatch: stored {:?}/{:?}, expected {:?}/{:?}",
                    ckpt.meta.dims, ckpt.meta.arch, dims, arch
                ),
            ));
        }
        Ok(ckpt)
    }
}
