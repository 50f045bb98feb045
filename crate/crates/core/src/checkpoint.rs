//! `PGW1` weight files: named f32 tensors followed by the configuration
//! text they were trained with.
//!
//! Layout (little-endian): magic `PGW1`, `u32` tensor count, then per tensor
//! `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and the f32
//! payload; finally a `u32`-length-prefixed UTF-8 configuration block.

use std::fs;
use std::path::Path;

use crate::config::{ConfigError, FlatConfig};
use crate::network::{FlowModel, ModelConfig, ModelError};
use crate::params::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGW1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a PGW1 checkpoint")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config: FlatConfig,
}

impl Checkpoint {
    pub fn model(&self) -> Result<FlowModel<f32>, CheckpointError> {
        let cfg = ModelConfig::from_flat(&self.config)?;
        Ok(FlowModel::from_params(cfg, self.params.clone())?)
    }
}

pub fn encode_checkpoint(params: &ParamStore<f32>, config: &FlatConfig) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(16 + 4 * params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let count = u32::try_from(params.len()).map_err(|_| CheckpointError::Invalid("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| CheckpointError::Invalid(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Invalid(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = config.to_string();
    let len = u32::try_from(text.len()).map_err(|_| CheckpointError::Invalid("config too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Invalid(format!("shape overflow in {name}")))?;
        let payload = r.take(
            numel.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.get(&name).is_some() {
            return Err(CheckpointError::Invalid(format!("duplicate tensor '{name}'")));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| CheckpointError::Invalid("config block is not UTF-8".into()))?;
    let config = FlatConfig::parse(text)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, config })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, config: &FlatConfig) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
