//! Checkpoint layout:
//!
//! ```text
//! bytes 0..4     magic "SSTK"
//! bytes 4..8     header length H, u32 little-endian
//! bytes 8..8+H   UTF-8 JSON header {format, version, config, freeze, params: [{name, group, shape}]}
//! bytes 8+H..    parameter values as f64 little-endian, in header order, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FreezeFlags, ModelError, ParamGroup, Parameter, SstConfig, SstModel};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSTK";
const FORMAT: &str = "sst-atl-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: SstConfig,
    freeze: FreezeFlags,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl SstModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            freeze: self.freeze.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + self.param_count() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 {
            return Err(err(format!("truncated: {} bytes", bytes.len())));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err(format!("bad magic {:?}", &bytes[..4])));
        }
        let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let body = &bytes[8..];
        if body.len() < header_len {
            return Err(err(format!("header needs {header_len} bytes, {} available", body.len())));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| err(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(err(format!("unsupported format {} v{}", header.format, header.version)));
        }
        header.config.validate()?;
        if header.params.len() != super::pool_base(&header.config) + 7 {
            return Err(err("parameter list does not match the configuration"));
        }
        let expected = super::layout(&header.config);
        if expected.len() != header.params.len() {
            return Err(err("parameter list does not match the configuration"));
        }
        let mut total = 0usize;
        for ((name, group, shape), entry) in expected.iter().zip(&header.params) {
            if *name != entry.name || *group != entry.group || *shape != entry.shape {
                return Err(err(format!("unexpected parameter entry {}", entry.name)));
            }
            total = total
                .checked_add(shape.iter().product::<usize>())
                .ok_or_else(|| err("parameter count overflows"))?;
        }
        let payload = &body[header_len..];
        let needed = total.checked_mul(8).ok_or_else(|| err("parameter count overflows"))?;
        if payload.len() != needed {
            return Err(err(format!("payload is {} bytes, expected {needed}", payload.len())));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = Vec::with_capacity(expected.len());
        for (name, group, shape) in expected {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(err(format!("non-finite value in {name}")));
            }
            params.push(Parameter {
                value: Tensor::new(shape, data)?,
                name,
                group,
            });
        }
        SstModel::from_parts(header.config, params, Some(header.freeze))
    }
}

pub fn save_checkpoint(model: &SstModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, model.to_checkpoint_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SstModel, ModelError> {
    SstModel::from_checkpoint_bytes(&fs::read(path)?)
}
