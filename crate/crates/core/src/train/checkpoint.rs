//! Binary checkpoints: a one-line preamble declaring the manifest length, a
//! UTF-8 JSON manifest, then a blob of little-endian tensors.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use super::trainer::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ModelParams};
use crate::numcore::{DType, Float, Tensor};
use crate::schedule::SharingSchedule;

pub const MAGIC: &str = "EPAS-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    /// Canonical `key=value` model config.
    pub model: String,
    /// Number of completed training steps.
    pub step: usize,
    pub schedule: Option<SharingSchedule>,
    pub train: Option<TrainConfig>,
    /// Per-tensor optimizer update counts, empty without optimizer state.
    pub adam_counts: Vec<u64>,
    pub blob_len: usize,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: ModelParams<T>,
    pub optim: Option<AdamW<T>>,
    pub step: usize,
    pub schedule: Option<SharingSchedule>,
    pub train: Option<TrainConfig>,
}

impl<T: Float> Checkpoint<T> {
    /// Number of layers a checkpoint may run in sharing mode: the trained
    /// target region, or zero for a run without a schedule.
    pub fn region(&self) -> &[usize] {
        self.schedule.as_ref().map_or(&[], |s| s.target.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor<T>, blob: &mut Vec<u8>| {
            let offset = blob.len();
            for &x in t.data() {
                x.write_le(blob);
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.name().to_string(),
                offset,
                nbytes: blob.len() - offset,
            });
        };
        let named = self.params.named();
        for (name, t) in &named {
            push(name.clone(), t, &mut blob);
        }
        if let Some(opt) = &self.optim {
            for ((name, _), m) in named.iter().zip(&opt.m) {
                push(format!("adam.m.{name}"), m, &mut blob);
            }
            for ((name, _), v) in named.iter().zip(&opt.v) {
                push(format!("adam.v.{name}"), v, &mut blob);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_hash: self.model.hash(),
            model: self.model.canonical(),
            step: self.step,
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            adam_counts: self.optim.as_ref().map_or_else(Vec::new, |o| o.counts.clone()),
            blob_len: blob.len(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", header.len()).into_bytes();
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses a checkpoint, converting tensors to `T`. When `expect` is
    /// given the stored model config must hash to the same value.
    pub fn from_bytes(bytes: &[u8], expect: Option<&ModelConfig>) -> Result<Self> {
        let (manifest, blob) = split(bytes)?;
        let model = ModelConfig::from_canonical(&manifest.model)?;
        if model.hash() != manifest.config_hash {
            return Err(bad("config hash does not match the stored model config"));
        }
        if let Some(e) = expect {
            if e.hash() != manifest.config_hash {
                return Err(bad(format!(
                    "config hash mismatch: checkpoint {} but run expects {}",
                    &manifest.config_hash[..12],
                    &e.hash()[..12]
                )));
            }
        }
        let mut entries = manifest.tensors.iter();
        let mut next = |want: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let e = entries.next().ok_or_else(|| bad(format!("missing tensor {want}")))?;
            if e.name != want || e.shape != shape {
                return Err(bad(format!("expected {want} {shape:?}, found {} {:?}", e.name, e.shape)));
            }
            decode(e, blob)
        };
        let shapes = param_shapes(&model);
        let params: Vec<Tensor<T>> = shapes.iter().map(|(n, s)| next(n, s)).collect::<Result<_>>()?;
        let optim = if manifest.adam_counts.is_empty() {
            None
        } else {
            if manifest.adam_counts.len() != shapes.len() {
                return Err(bad("optimizer counts do not match the tensor list"));
            }
            let m = shapes.iter().map(|(n, s)| next(&format!("adam.m.{n}"), s)).collect::<Result<_>>()?;
            let v = shapes.iter().map(|(n, s)| next(&format!("adam.v.{n}"), s)).collect::<Result<_>>()?;
            Some(AdamW { m, v, counts: manifest.adam_counts.clone() })
        };
        if entries.next().is_some() {
            return Err(bad("unexpected trailing tensors"));
        }
        if let Some(s) = &manifest.schedule {
            s.validate(&model)?;
        }
        Ok(Self {
            params: ModelParams::from_tensors(&model, params)?,
            model,
            optim,
            step: manifest.step,
            schedule: manifest.schedule,
            train: manifest.train,
        })
    }

    pub fn load(path: &Path, expect: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expect)
    }
}

/// Manifest of the checkpoint at `path`, without decoding tensors.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    Ok(split(&bytes)?.0)
}

/// Storage precision of the weights at `path`.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    let m = read_manifest(path)?;
    let first = m.tensors.first().ok_or_else(|| bad("checkpoint holds no tensors"))?;
    DType::parse(&first.dtype).ok_or_else(|| bad(format!("unknown dtype {}", first.dtype)))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let nl = bytes.iter().take(64).position(|&b| b == b'\n').ok_or_else(|| bad("missing preamble"))?;
    let preamble = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("preamble is not UTF-8"))?;
    let parts: Vec<&str> = preamble.split(' ').collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version: u32 = parts[1].parse().map_err(|_| bad("malformed format version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let header_len: usize = parts[2].parse().map_err(|_| bad("malformed manifest length"))?;
    let body = &bytes[nl + 1..];
    if body.len() < header_len {
        return Err(bad("truncated manifest"));
    }
    let header = std::str::from_utf8(&body[..header_len]).map_err(|_| bad("manifest is not UTF-8"))?;
    let manifest: Manifest = serde_json::from_str(header).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(bad("manifest and preamble disagree on the format version"));
    }
    let blob = &body[header_len..];
    if blob.len() != manifest.blob_len {
        return Err(bad(format!("blob holds {} bytes, manifest declares {}", blob.len(), manifest.blob_len)));
    }
    let mut end = 0;
    for e in &manifest.tensors {
        let dtype = DType::parse(&e.dtype).ok_or_else(|| bad(format!("unknown dtype {}", e.dtype)))?;
        if e.offset != end || e.nbytes != e.shape.iter().product::<usize>() * dtype.size() {
            return Err(bad(format!("tensor {} does not tile the blob", e.name)));
        }
        end += e.nbytes;
    }
    if end != blob.len() {
        return Err(bad("tensor entries do not cover the blob"));
    }
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(bad("blob checksum mismatch"));
    }
    Ok((manifest, blob))
}

fn decode<T: Float>(e: &TensorEntry, blob: &[u8]) -> Result<Tensor<T>> {
    let bytes = &blob[e.offset..e.offset + e.nbytes];
    let data: Vec<T> = match DType::parse(&e.dtype) {
        Some(DType::F32) => bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
        Some(DType::F64) => bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        None => return Err(bad(format!("unknown dtype {}", e.dtype))),
    };
    Tensor::new(e.shape.clone(), data)
}
