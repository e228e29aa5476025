//! Flat tensor files.
//!
//! Layout: the 8-byte magic `LPCKPT01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the raw little-endian payload of every tensor
//! back to back. The header lists each tensor's name, shape, byte offset
//! into the payload and byte length, plus a free-form `meta` object.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetworkSpec, Params};
use crate::optim::OptimizerState;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LPCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

const WIDTH: usize = std::mem::size_of::<Scalar>();

fn dtype() -> &'static str {
    if WIDTH == 8 {
        "f64"
    } else {
        "f32"
    }
}

pub fn encode(tensors: &[(String, Tensor)], meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        dtype: dtype().into(),
        tensors: entries,
        meta,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    if header.dtype != dtype() {
        return Err(bad(&format!(
            "checkpoint dtype {} does not match build dtype {}",
            header.dtype,
            dtype()
        )));
    }
    let payload = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + e.len as usize;
        if end > payload.len() || e.len as usize % WIDTH != 0 {
            return Err(bad(&format!("tensor {} overruns payload", e.name)));
        }
        let data: Vec<Scalar> = payload[start..end]
            .chunks_exact(WIDTH)
            .map(|c| Scalar::from_le_bytes(c.try_into().expect("scalar width")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((tensors, header.meta))
}

pub fn write(path: &Path, tensors: &[(String, Tensor)], meta: serde_json::Value) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Saves network parameters and, optionally, per-block optimizer slots.
pub fn save_network(
    path: &Path,
    spec: &NetworkSpec,
    params: &Params,
    optimizers: &[(usize, &OptimizerState)],
) -> Result<()> {
    let mut tensors = params.named();
    let mut steps = serde_json::Map::new();
    for (block, opt) in optimizers {
        tensors.extend(opt.named_slots(&format!("opt.block{block}")));
        steps.insert(format!("block{block}"), opt.step.into());
    }
    let meta = serde_json::json!({
        "network": spec,
        "optimizer_steps": steps,
    });
    write(path, &tensors, meta)
}

/// Loads the network parameters written by [`save_network`]; optimizer slots are ignored.
pub fn load_network(path: &Path) -> Result<(NetworkSpec, Params)> {
    let (tensors, meta) = read(path)?;
    let spec: NetworkSpec = serde_json::from_value(meta["network"].clone())?;
    let params: Vec<(String, Tensor)> = tensors
        .into_iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .collect();
    let params = Params::from_named(&spec, &params)?;
    Ok((spec, params))
}
