//! Binary checkpoints: `CTRN`, a `u32` version, a `u64` header length, a
//! JSON header, then every parameter tensor as little-endian `f64`s in
//! declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Layer, LayerSpec, Network};

const MAGIC: &[u8; 4] = b"CTRN";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub split_index: usize,
    pub layers: Vec<LayerSpec>,
    /// `(mean, std)` of a leading normalization layer.
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub epoch: usize,
}

/// Serializes `net` into checkpoint bytes.
pub fn to_bytes(net: &Network, architecture: &str, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let normalization = match net.layers.first() {
        Some(Layer::Normalize { mean, std }) => Some((mean.clone(), std.clone())),
        _ => None,
    };
    let header = CheckpointHeader {
        architecture: architecture.to_string(),
        input_shape: net.input_shape.clone(),
        num_classes: net.num_classes,
        split_index: net.split_index,
        layers: net.specs(),
        normalization,
        shapes: net.params().iter().map(|t| t.shape().to_vec()).collect(),
        seed,
        epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Network, CheckpointHeader)> {
    let bad = |d: String| Error::Format {
        path: path.to_path_buf(),
        detail: d,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (missing CTRN magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut net = Network::from_specs(&header.layers, header.input_shape.clone(), header.num_classes, header.split_index)?;
    if let (Some((mean, std)), Some(Layer::Normalize { mean: m, std: s })) = (&header.normalization, net.layers.first_mut()) {
        *m = mean.clone();
        *s = std.clone();
    }
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|t| t.shape().to_vec()).collect();
    if shapes != header.shapes {
        return Err(bad("tensor shapes disagree with the layer list".into()));
    }
    let mut at = 16 + len;
    let expected = at + 8 * net.param_count();
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    for t in net.params_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            at += 8;
        }
    }
    net.validate()?;
    Ok((net, header))
}

pub fn save(path: &Path, net: &Network, architecture: &str, seed: u64, epoch: usize) -> Result<()> {
    let bytes = to_bytes(net, architecture, seed, epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
