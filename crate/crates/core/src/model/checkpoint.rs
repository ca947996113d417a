//! Binary checkpoint files.
//!
//! Layout (little-endian): `"LGFC"`, `u32` version, `u32` config length and
//! the canonical config text, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rank, `u32` dims and the `f32` payload.
//! Model parameters come first in store order; any further tensors are
//! auxiliary state (for example optimizer accumulators).

use std::path::Path;

use super::config::ModelConfig;
use super::params::ParamStore;
use super::LegoFormer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LGFC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: LegoFormer,
    /// Named tensors stored after the model parameters.
    pub extra: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &LegoFormer, extra: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = model.config().to_canonical_string();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    let tensors = model
        .params()
        .iter()
        .chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
    put_u32(&mut out, (model.params().len() + extra.len()) as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", self.origin, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32()? as usize;
        let origin = self.origin;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::format("checkpoint", origin, format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint. When `expected` is given, the stored config must
/// equal it; that check happens before any weight is read.
pub fn decode_checkpoint(
    bytes: &[u8],
    origin: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", origin, "missing LGFC magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            origin,
            format!("unsupported version {version}"),
        ));
    }
    let cfg_text = r.string("config")?;
    let config = ModelConfig::from_canonical_string(&cfg_text)?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model config",
                origin.display()
            )));
        }
    }
    config.validate()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::format("checkpoint", origin, "tensor too large"))?;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", origin, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", origin, "trailing bytes"));
    }
    let n_params = super::params::param_specs(&config).len();
    if tensors.len() < n_params {
        return Err(Error::format(
            "checkpoint",
            origin,
            "fewer tensors than the model needs",
        ));
    }
    let extra = tensors.split_off(n_params);
    let model = LegoFormer::from_params(config, ParamStore::new(tensors)?)?;
    Ok(Checkpoint { model, extra })
}

pub fn save_checkpoint(path: &Path, model: &LegoFormer, extra: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(model, extra)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, expected)
}
