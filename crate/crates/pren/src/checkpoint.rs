//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PRENCKPT"
//! version  u32
//! cfg_len  u32, followed by cfg_len bytes of UTF-8 run-config JSON
//! n_params u32
//! each param:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, then ndim u32 extents
//!   data     numel × f32
//! opt_flag u8 (0 or 1)
//! if 1, per param in the same order: two numel × f32 blocks
//!   (squared-gradient and squared-update accumulators)
//! ```
//!
//! Loading validates the magic and version before touching anything else
//! and bounds-checks every length against the remaining input, so the
//! decoder is total on arbitrary bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const MAGIC: [u8; 8] = *b"PRENCKPT";
pub const VERSION: u32 = 1;

const MAX_CONFIG_LEN: usize = 1 << 20;
const MAX_NAME_LEN: usize = 256;
const MAX_PARAMS: usize = 100_000;
const MAX_NDIM: usize = 8;
const MAX_NUMEL: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    /// (name, shape, row-major values), in registration order.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    /// Optimizer accumulators aligned with `params`.
    pub opt_state: Option<Vec<(Vec<f32>, Vec<f32>)>>,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config_json.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &ckpt.opt_state {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            for (sq_grad, sq_update) in state {
                for v in sq_grad {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in sq_update {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let cfg_len = r.u32()? as usize;
    if cfg_len > MAX_CONFIG_LEN {
        return Err(Error::format("checkpoint", format!("config length {cfg_len} too large")));
    }
    let config_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::format("checkpoint", "config is not UTF-8".to_string()))?
        .to_string();
    let n_params = r.u32()? as usize;
    if n_params > MAX_PARAMS {
        return Err(Error::format("checkpoint", format!("parameter count {n_params} too large")));
    }
    let mut params = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::format("checkpoint", format!("bad name length {name_len}")));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8".to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::format("checkpoint", format!("bad rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let e = r.u32()? as usize;
            count = count
                .checked_mul(e)
                .filter(|&c| c <= MAX_NUMEL)
                .ok_or_else(|| Error::format("checkpoint", format!("element count overflow in {name}")))?;
            shape.push(e);
        }
        if count == 0 {
            return Err(Error::format("checkpoint", format!("zero extent in {name}")));
        }
        let data = r.f32s(count)?;
        params.push((name, shape, data));
    }
    let opt_state = match r.u8()? {
        0 => None,
        1 => {
            let mut state = Vec::with_capacity(params.len());
            for (_, shape, _) in &params {
                let count = numel(shape);
                let sq_grad = r.f32s(count)?;
                let sq_update = r.f32s(count)?;
                state.push((sq_grad, sq_update));
            }
            Some(state)
        }
        other => {
            return Err(Error::format("checkpoint", format!("bad optimizer flag {other}")));
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(Checkpoint { config_json, params, opt_state })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Snapshot a parameter store (training precision is f32; stored as-is).
pub fn snapshot(
    config_json: String,
    store: &ParamStore<f32>,
    opt_state: Option<Vec<(Vec<f32>, Vec<f32>)>>,
) -> Checkpoint {
    let params = store
        .iter()
        .map(|(_, item)| {
            (item.name.clone(), item.value.shape().to_vec(), item.value.data().to_vec())
        })
        .collect();
    Checkpoint { config_json, params, opt_state }
}

/// Copy checkpoint values into a freshly constructed store, matching by
/// name and validating shapes.
pub fn restore_into(ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, shape, data) in &ckpt.params {
        let id = store.find(name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter {name} not present in this model"))
        })?;
        let item = store.get_mut(id);
        if item.value.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                shape,
                item.value.shape()
            )));
        }
        item.value = Tensor::from_vec(shape.clone(), data.clone())?;
    }
    Ok(())
}
