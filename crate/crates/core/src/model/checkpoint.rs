//! Checkpoint file layout (all integers u32, little-endian):
//!
//! ```text
//! "SFXC" | version | config_len | config text (key = value lines)
//! target_mean f64 | target_std f64 | param_count
//! per parameter: name_len | name | ndim | dims... | f32 values
//! ```

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{assemble, SfcNextParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFXC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &SfcNextParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text = params.config.to_string();
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&params.target_mean.to_le_bytes());
    buf.extend_from_slice(&params.target_std.to_le_bytes());
    put_u32(&mut buf, params.store.len() as u32);
    for (name, t) in params.store.names().iter().zip(params.store.tensors()) {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SfcNextParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "SFXC",
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Integrity("checkpoint config is not UTF-8".into()))?;
    let mut config = ModelConfig::tiny();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Integrity(format!("bad config line {line:?}")))?;
        if !config.set(k.trim(), v.trim())? {
            return Err(Error::Integrity(format!("unknown config key {:?}", k.trim())));
        }
    }
    let target_mean = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let target_std = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let values = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, values)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    assemble(&config, tensors, target_mean, target_std)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
