//! Binary checkpoint: `SQNT`, version (u32 LE), header length (u32 LE), a
//! JSON header, then every tensor as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MicroTransformerConfig;
use super::forward::ActScales;
use super::params::Params;
use super::train::TrainState;
use super::ModelError;
use crate::gradtape::Tensor;

pub const MAGIC: &[u8; 4] = b"SQNT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: MicroTransformerConfig,
    step: usize,
    scales: ActScales,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>, ModelError> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (prefix, params) in [("teacher", &state.teacher), ("student", &state.student)] {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            entries.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len() / 4,
            });
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        config: state.cfg.clone(),
        step: state.step,
        scales: state.scales.clone(),
        tensors: entries,
    })
    .map_err(|e| err(e.to_string()))?;
    let header_len = u32::try_from(header.len()).map_err(|_| err("header too large"))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, ModelError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| err("truncated preamble"))
}

pub fn decode(bytes: &[u8]) -> Result<TrainState, ModelError> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(err("bad magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| err(e.to_string()))?;
    header.config.validate()?;
    let payload = &bytes[12 + header_len..];

    let spec = Params::spec(&header.config);
    let load = |prefix: &str| -> Result<Params, ModelError> {
        let mut names = Vec::with_capacity(spec.len());
        let mut tensors = Vec::with_capacity(spec.len());
        for (name, shape) in &spec {
            let full = format!("{prefix}.{name}");
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| err(format!("missing tensor {full}")))?;
            if &entry.shape != shape {
                return Err(err(format!("tensor {full} has shape {:?}, expected {shape:?}", entry.shape)));
            }
            let len: usize = shape.iter().product();
            let raw = payload
                .get(entry.offset * 4..(entry.offset + len) * 4)
                .ok_or_else(|| err(format!("payload too short for {full}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            tensors.push(Tensor::new(shape.clone(), data)?);
            names.push(name.clone());
        }
        Ok(Params::from_parts(names, tensors))
    };
    Ok(TrainState {
        teacher: load("teacher")?,
        student: load("student")?,
        scales: header.scales,
        step: header.step,
        cfg: header.config,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<(), ModelError> {
    std::fs::write(path, encode(state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState, ModelError> {
    decode(&std::fs::read(path)?)
}
