//! Checkpoint archive: a magic-tagged binary container of named f64 arrays
//! with an embedded JSON header (spec, creating config, seed, epoch) and a
//! sidecar `.json` manifest carrying the same header for portability.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{DetectorModel, DetectorSpec};
use crate::tensor::Conv2d;

const MAGIC: &[u8; 8] = b"AIDCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterInfo {
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: DetectorSpec,
    config: serde_json::Value,
    seed: u64,
    epoch: usize,
    #[serde(default)]
    adapter: Option<AdapterInfo>,
    arrays: Vec<ArrayInfo>,
}

/// A loaded checkpoint: metadata plus named parameter arrays in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub spec: DetectorSpec,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    adapter: Option<AdapterInfo>,
    arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// SHA-256 over names and little-endian values, in file order.
    pub fn params_hash(&self) -> String {
        hash_params(self.arrays.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
    }

    /// Rebuild the detector (and the channel adapter, when present).
    pub fn into_model(self) -> Result<(DetectorModel, Option<Conv2d>), CheckpointError> {
        let spec = self.spec.clone();
        spec.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut arrays: BTreeMap<String, Vec<f64>> = self.arrays.into_iter().collect();
        let mut take = |name: &str, expect: usize| -> Result<Vec<f64>, CheckpointError> {
            let arr = arrays
                .remove(name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing array {name}")))?;
            if arr.len() != expect {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name} has length {}, expected {expect}",
                    arr.len()
                )));
            }
            Ok(arr)
        };

        let num_stages = spec.max_stride().trailing_zeros() as usize;
        let mut backbone = Vec::with_capacity(num_stages);
        let mut c_prev = 3;
        for stage in 0..num_stages {
            let stride = 1usize << (stage + 1);
            let c_out = spec.backbone_channels(stride);
            let mut conv = Conv2d::new(c_prev, c_out, 3, 2, 1);
            conv.weight = take(&format!("backbone.{stage}.weight"), conv.weight.len())?;
            conv.bias = take(&format!("backbone.{stage}.bias"), conv.bias.len())?;
            backbone.push(conv);
            c_prev = c_out;
        }
        let mut laterals = Vec::with_capacity(spec.num_levels());
        for (i, &stride) in spec.fpn_strides.iter().enumerate() {
            let c_in = spec.backbone_channels(stride);
            let mut conv = Conv2d::new(c_in, spec.fpn_channels, 1, 1, 0);
            conv.weight = take(&format!("lateral.{i}.weight"), conv.weight.len())?;
            conv.bias = take(&format!("lateral.{i}.bias"), conv.bias.len())?;
            laterals.push(conv);
        }
        let mut head = Conv2d::new(spec.fpn_channels, spec.num_classes + 5, 3, 1, 1);
        head.weight = take("head.weight", head.weight.len())?;
        head.bias = take("head.bias", head.bias.len())?;

        let adapter = match self.adapter {
            Some(info) => {
                let mut conv = Conv2d::new(info.c_in, info.c_out, 1, 1, 0);
                conv.weight = take("adapter.weight", conv.weight.len())?;
                conv.bias = take("adapter.bias", conv.bias.len())?;
                Some(conv)
            }
            None => None,
        };
        if let Some((name, _)) = arrays.into_iter().next() {
            return Err(CheckpointError::Corrupt(format!("unexpected array {name}")));
        }
        Ok((DetectorModel::from_parts(spec, backbone, laterals, head), adapter))
    }
}

pub fn hash_params<'a>(params: impl Iterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut hasher = Sha256::new();
    for (name, values) in params {
        hasher.update(name.as_bytes());
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write a checkpoint archive plus its sidecar JSON manifest.
pub fn save_checkpoint(
    path: &Path,
    model: &DetectorModel,
    adapter: Option<&Conv2d>,
    config: &serde_json::Value,
    seed: u64,
    epoch: usize,
) -> Result<(), CheckpointError> {
    let mut named: Vec<(String, &[f64])> = model.named_params();
    if let Some(a) = adapter {
        named.push(("adapter.weight".into(), &a.weight));
        named.push(("adapter.bias".into(), &a.bias));
    }
    let header = Header {
        spec: model.spec().clone(),
        config: config.clone(),
        seed,
        epoch,
        adapter: adapter.map(|a| AdapterInfo { c_in: a.c_in, c_out: a.c_out }),
        arrays: named.iter().map(|(n, v)| ArrayInfo { name: n.clone(), len: v.len() }).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for (_, values) in &named {
        for v in *values {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;

    let manifest = serde_json::to_vec_pretty(&header)?;
    std::fs::write(sidecar_path(path), manifest)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    if header_len > 64 << 20 {
        return Err(CheckpointError::Corrupt("unreasonable header length".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for info in &header.arrays {
        let mut buf = vec![0.0f64; info.len];
        r.read_f64_into::<LittleEndian>(&mut buf)
            .map_err(|e| CheckpointError::Corrupt(format!("array {}: {e}", info.name)))?;
        arrays.push((info.name.clone(), buf));
    }
    Ok(Checkpoint {
        spec: header.spec,
        config: header.config,
        seed: header.seed,
        epoch: header.epoch,
        adapter: header.adapter,
        arrays,
    })
}
