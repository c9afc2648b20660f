//! Binary checkpoint archive.
//!
//! Layout (little-endian): magic `MAOCKPT\0`, `u32` format version, `u32`
//! header length and a JSON header, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, a `u8` kind, a `u32` rank, `u32` dims and
//! the `f32` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NamedTensor, NetConfig, Network};
use crate::nn::ParamKind;
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MAOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub blocks: usize,
    pub channels: Vec<usize>,
    pub decoder_width: usize,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::NormAffine => 1,
        ParamKind::NormStat => 2,
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &Network<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        blocks: cfg.blocks(),
        channels: cfg.channels.clone(),
        decoder_width: cfg.decoder_width,
    })?;
    let state = model.state();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for t in &state {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(kind_code(t.kind));
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Vec<NamedTensor>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| r.fail(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::NormAffine,
            2 => ParamKind::NormStat,
            k => return Err(r.fail(format!("`{name}`: unknown kind {k}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name,
            kind,
            shape,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Network<T>) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode_checkpoint(&bytes, path)?;
    let cfg = NetConfig {
        channels: header.channels,
        decoder_width: header.decoder_width,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Network::new(cfg, &mut rng).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    model.load_state(&tensors).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(model)
}
