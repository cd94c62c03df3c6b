//! `ATDC` checkpoint files.
//!
//! ```text
//! "ATDC" | version: u32 LE | header_len: u32 LE | header (UTF-8) | payload
//! ```
//!
//! The header is line oriented: `config <json>` followed by one
//! `tensor <name> <d0>x<d1>x... <byte offset>` line per tensor, in store
//! order. The payload is the concatenation of little-endian `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AtdModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ATDC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config: &ModelConfig, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            tensors: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_model(model: &AtdModel) -> Self {
        Self::from_store(&model.config, &model.store)
    }

    pub fn into_model(self) -> Result<AtdModel> {
        AtdModel::from_tensors(self.config, self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("config {}\n", serde_json::to_string(&self.config)?);
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("invalid tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
            offset += 4 * t.numel();
        }
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if found != MAGIC {
            return Err(Error::BadMagic { found });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked")) as usize;
        let header = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header = std::str::from_utf8(header)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let payload = &bytes[12 + header_len..];

        let mut lines = header.lines();
        let config = lines
            .next()
            .and_then(|l| l.strip_prefix("config "))
            .ok_or_else(|| Error::Checkpoint("missing config line".into()))?;
        let config: ModelConfig = serde_json::from_str(config)?;

        let mut tensors = Vec::new();
        let mut expected_offset = 0usize;
        for line in lines {
            let fields: Vec<&str> = line.split(' ').collect();
            let [kind, name, dims, offset] = fields[..] else {
                return Err(Error::Checkpoint(format!("malformed line `{line}`")));
            };
            if kind != "tensor" {
                return Err(Error::Checkpoint(format!("unknown record `{kind}`")));
            }
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape `{dims}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset `{offset}`")))?;
            if offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` at offset {offset}, expected {expected_offset}"
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = payload
                .get(offset..offset + 4 * numel)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push((name.to_string(), Tensor::new(&shape, data)?));
            expected_offset += 4 * numel;
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
