//! Binary checkpoint container (all integers little-endian):
//!
//! ```text
//! "MGPT"                      4 bytes
//! version                     u32 (= 1)
//! config length, config JSON  u64 + bytes
//! tokenizer length, JSON      u64 + bytes
//! tensor count                u32
//! per tensor:  name length u16, name bytes, ndim u8, dims u64 × ndim, f32 × Π dims
//! ```
//!
//! Tensors appear in canonical layout order. Nothing follows the last tensor.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::BpeTokenizer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MGPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated { what })?;
        if end > self.buf.len() {
            return Err(Error::Truncated { what });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let len = self.u64(what)?;
        let len = usize::try_from(len).map_err(|_| Error::Truncated { what })?;
        self.take(len, what)
    }
}

impl<S: Scalar> ModelBundle<S> {
    /// Serialized checkpoint. Parameters are written as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let tokenizer = self.tokenizer.to_json().into_bytes();
        let named = self.named_tensors();
        let mut out = Vec::with_capacity(64 + config.len() + tokenizer.len() + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(tokenizer.len() as u64).to_le_bytes());
        out.extend_from_slice(&tokenizer);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_f32c().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let config: ModelConfig =
            serde_json::from_slice(r.blob("config")?).map_err(|e| Error::Format {
                what: "checkpoint config",
                detail: e.to_string(),
            })?;
        config
            .validate()
            .map_err(|e| Error::Inconsistent(e.to_string()))?;
        let tok_text = std::str::from_utf8(r.blob("tokenizer")?).map_err(|e| Error::Format {
            what: "checkpoint tokenizer",
            detail: e.to_string(),
        })?;
        let tokenizer = BpeTokenizer::from_json(tok_text)?;

        let layout = Self::layout(&config);
        let count = r.u32("tensor count")? as usize;
        if count != layout.len() {
            return Err(Error::Inconsistent(format!(
                "{count} tensors stored, config implies {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (expected_name, expected_shape) in &layout {
            let name_len = r.u16("tensor name")? as usize;
            let name = r.take(name_len, "tensor name")?;
            if name != expected_name.as_bytes() {
                return Err(Error::Inconsistent(format!(
                    "expected tensor {expected_name}, found {}",
                    String::from_utf8_lossy(name)
                )));
            }
            let ndim = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("tensor dims")? as usize);
            }
            if &shape != expected_shape {
                return Err(Error::Inconsistent(format!(
                    "{expected_name} stored as {shape:?}, config implies {expected_shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "tensor payload")?;
            let data: Vec<S> = payload
                .chunks_exact(4)
                .map(|c| S::from_f32c(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Inconsistent(format!("{expected_name}: {e}")))?;
            tensors.push(t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Inconsistent(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Self::from_tensors(config, tokenizer, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 (hex) of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_bytes())
    }
}

pub(crate) fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
