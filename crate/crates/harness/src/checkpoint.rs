//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RSKCKPT1"            8-byte magic
//! u64                    length of the JSON header in bytes
//! header                 UTF-8 JSON, see `Header`
//! data                   tensors back to back, raw little-endian elements
//! ```
//!
//! The header records the run config as TOML text, its hash, the training
//! position, the metric log and a table of tensors (name, role, dtype, shape,
//! byte offset into the data block). Optimizer moments are stored as tensors
//! with role `adam_m` / `adam_v`.
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! crash mid-save leaves the previous checkpoint intact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, RunConfig, CODE_VERSION};
use crate::error::{HarnessError, Result};
use crate::optim::{AdamW, Moments};

pub const MAGIC: &[u8; 8] = b"RSKCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    code_version: String,
    config_hash: String,
    config: String,
    epochs_done: usize,
    global_step: usize,
    log: Vec<EpochLog>,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub epochs_done: usize,
    pub global_step: usize,
    pub log: Vec<EpochLog>,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Moments>,
}

fn ckpt_err(path: &Path, detail: impl std::fmt::Display) -> HarnessError {
    HarnessError::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(HarnessError::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect(),
        other => return Err(HarnessError::Config(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn tensor_from_bytes(path: &Path, e: &TensorEntry, data: &[u8]) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let t = match e.dtype.as_str() {
        "f32" if data.len() == n * 4 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        }
        "f64" if data.len() == n * 8 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        }
        _ => return Err(ckpt_err(path, format!("tensor {} has a bad dtype or size", e.name))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let mut push = |name: &str, role: &str, t: &Tensor| -> Result<()> {
            let bytes = tensor_bytes(t)?;
            tensors.push(TensorEntry {
                name: name.to_string(),
                role: role.to_string(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                bytes: bytes.len() as u64,
            });
            data.extend_from_slice(&bytes);
            Ok(())
        };
        for (name, t) in &self.params {
            push(name, "param", t)?;
        }
        for (name, m) in &self.optimizer {
            push(name, "adam_m", &m.m)?;
            push(name, "adam_v", &m.v)?;
        }
        let header = Header {
            code_version: CODE_VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            config: self.config.to_toml(),
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            log: self.log.clone(),
            adam_steps: self.optimizer.iter().map(|(k, m)| (k.clone(), m.steps)).collect(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(path, e))?;

        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        }
        let tmp = tmp_path(path);
        let write = || -> std::io::Result<()> {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            f.write_all(&data)?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(HarnessError::io(path))
    }

    /// Reads a checkpoint and checks that its config hash matches the hash
    /// recomputed under the current code version, and `expected` when given.
    /// `force` downgrades a mismatch to a warning.
    pub fn load(path: &Path, expected: Option<&str>, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ckpt_err(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| ckpt_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ckpt_err(path, e))?;
        let data = &bytes[16 + hlen..];

        let recomputed = config_hash(&header.config);
        let want = expected.unwrap_or(&recomputed);
        if header.config_hash != recomputed || header.config_hash != want {
            let err = HarnessError::HashMismatch {
                path: path.to_path_buf(),
                stored: header.config_hash.clone(),
                expected: want.to_string(),
            };
            if !force {
                return Err(err);
            }
            log::warn!("{err} (continuing because of --force)");
        }
        let config = RunConfig::from_toml(&header.config)?;

        let mut params = BTreeMap::new();
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for e in &header.tensors {
            let start = e.offset as usize;
            let chunk = data
                .get(start..start + e.bytes as usize)
                .ok_or_else(|| ckpt_err(path, format!("tensor {} runs past the end of the file", e.name)))?;
            let t = tensor_from_bytes(path, e, chunk)?;
            let slot = match e.role.as_str() {
                "param" => &mut params,
                "adam_m" => &mut ms,
                "adam_v" => &mut vs,
                other => return Err(ckpt_err(path, format!("unknown tensor role {other:?}"))),
            };
            slot.insert(e.name.clone(), t);
        }
        let mut optimizer = BTreeMap::new();
        for (name, m) in ms {
            let v = vs.remove(&name).ok_or_else(|| ckpt_err(path, format!("{name} has m but no v")))?;
            let steps = *header.adam_steps.get(&name).ok_or_else(|| ckpt_err(path, format!("{name} has no step count")))?;
            optimizer.insert(name, Moments { m, v, steps });
        }
        Ok(Self {
            config,
            config_hash: header.config_hash,
            epochs_done: header.epochs_done,
            global_step: header.global_step,
            log: header.log,
            params,
            optimizer,
        })
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW) {
        opt.state = self.optimizer.clone();
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
