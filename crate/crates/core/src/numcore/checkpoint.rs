//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `CSTLCKPT`, `u32` version, architecture header
//! (`u32` feat_dim, context, hidden, vocab_size; `f64` dropout_rate), `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a
//! `u64` element count and the `f64` values.

use std::fs;
use std::path::Path;

use super::{Arch, Linear, ModelParams, TENSOR_NAMES};
use crate::error::{CastleError, Result};

const MAGIC: &[u8; 8] = b"CSTLCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(params.num_params() * 8 + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let a = &params.arch;
    for v in [a.feat_dim, a.context, a.hidden, a.vocab_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&a.dropout_rate.to_le_bytes());
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CastleError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| CastleError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CastleError::format(self.path, "truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| CastleError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(CastleError::format(path, "not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CastleError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let arch = Arch {
        feat_dim: r.u32()? as usize,
        context: r.u32()? as usize,
        hidden: r.u32()? as usize,
        vocab_size: r.u32()? as usize,
        dropout_rate: r.f64()?,
    };
    arch.validate()
        .map_err(|e| CastleError::format(path, e.to_string()))?;
    let (d, h, v, f) = (arch.window_dim(), arch.hidden, arch.vocab_size, arch.feat_dim);
    let mut params = ModelParams {
        layer1: Linear::zeros(d, h),
        layer2: Linear::zeros(h, h),
        main_head: Linear::zeros(h, v),
        aux_head: Linear::zeros(h, v),
        ssl_head: Linear::zeros(h, f),
        arch,
    };
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(CastleError::format(path, format!("expected 10 tensors, found {count}")));
    }
    for (expected, tensor) in params.tensors_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CastleError::format(path, "bad tensor name"))?;
        if name != expected {
            return Err(CastleError::format(path, format!("expected tensor {expected}, found {name}")));
        }
        let n = r.u64()? as usize;
        if n != tensor.len() {
            return Err(CastleError::format(
                path,
                format!("{name} has {n} values, architecture needs {}", tensor.len()),
            ));
        }
        for x in tensor.iter_mut() {
            *x = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(CastleError::format(path, "trailing bytes"));
    }
    Ok(params)
}
