//! Binary checkpoint: `COEX` magic, u32 LE version, u32 header length, JSON
//! header, then tensor records (u16 name length, name, u8 rank, rank × u64
//! dims, f32 LE values, row-major).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, ParamLayout};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"COEX";
pub const VERSION: u32 = 1;

/// Structured header. Optional sections are omitted when absent so plain
/// training checkpoints stay minimal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_version: Option<String>,
}

impl CheckpointHeader {
    pub fn new(model: ModelConfig) -> Self {
        CheckpointHeader {
            model,
            train: None,
            vocab: None,
            schema: None,
            threshold: None,
            model_version: None,
        }
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let header_bytes = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::Format("checkpoint header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + 4 * params.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (name, t) in params.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor {name} has rank {}", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let short = || Error::Truncated(format!("{n} bytes at offset {}", self.pos));
        let end = self.pos.checked_add(n).ok_or_else(short)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(short)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses checkpoint bytes and checks every record against the layout the
/// header's config implies.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Model<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.model.validate()?;
    let layout = ParamLayout::new(&header.model);
    let mut named = Vec::with_capacity(layout.len());
    for spec in &layout.specs {
        if r.done() {
            return Err(Error::Integrity(format!(
                "checkpoint ends before tensor {}",
                spec.name
            )));
        }
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if name != spec.name {
            return Err(Error::Integrity(format!(
                "expected tensor {}, found {name}",
                spec.name
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != spec.shape {
            return Err(Error::Integrity(format!(
                "tensor {name} has shape {shape:?}, config implies {:?}",
                spec.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Truncated(format!("tensor {name}")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if !r.done() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParams::from_named(&layout, named)?;
    let model = Model {
        config: header.model.clone(),
        layout,
        params,
    };
    Ok((header, model))
}

pub fn save_checkpoint(model: &Model<f32>, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let mut header = CheckpointHeader::new(model.config.clone());
    header.train = train.cloned();
    write_checkpoint(&header, &model.params, path)
}

pub fn write_checkpoint(header: &CheckpointHeader, params: &ModelParams<f32>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(header, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
