//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DPANETCK"  u32 version
//! u32 len + fingerprint   u32 len + canonical config text
//! u32 array count
//! per array: u32 len + name, u8 dtype, u32 ndim, u64 dims...
//! raw array data in manifest order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{DType, Real, Tensor};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DPANETCK";
pub const VERSION: u32 = 1;

/// Decoded header of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub fingerprint: String,
    pub config: ModelConfig,
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<T: Real>(config: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &config.fingerprint());
    put_str(&mut out, &config.to_canonical());
    put_u32(&mut out, store.len() as u32);
    for (_, name, t) in store.iter() {
        put_str(&mut out, name);
        out.push(T::DTYPE.code());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, _, t) in store.iter() {
        for &v in t.data() {
            v.write_le(&mut out);
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::MalformedCheckpoint("string is not UTF-8".into()))
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported format version {version}")));
    }
    let fingerprint = r.string()?;
    let text = r.string()?;
    let config = ModelConfig::from_canonical(&text)
        .map_err(|e| Error::MalformedCheckpoint(format!("embedded config: {e}")))?;
    if config.fingerprint() != fingerprint {
        return Err(Error::MalformedCheckpoint("fingerprint does not match embedded config".into()));
    }
    Ok(Header {
        version,
        fingerprint,
        config,
    })
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    parse_header(&mut Reader { bytes, pos: 0 })
}

/// Parameters of a checkpoint made for `expected`; any config difference is
/// rejected as incompatible.
pub fn decode<T: Real>(bytes: &[u8], expected: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    let header = parse_header(&mut r)?;
    if header.fingerprint != expected.fingerprint() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint fingerprint {} differs from configuration fingerprint {}",
            header.fingerprint,
            expected.fingerprint()
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("unknown dtype code {code} for `{name}`")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(Entry { name, dtype, shape });
    }

    let (model, mut store) = Model::new::<T>(expected, 0)?;
    if entries.len() != store.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint holds {} arrays, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        if e.dtype != T::DTYPE {
            return Err(Error::IncompatibleCheckpoint(format!(
                "`{}` is stored as {:?}, requested {:?}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let id = store
            .find(&e.name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("unexpected array `{}`", e.name)))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "`{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let size = e.dtype.size();
        let raw = r.take(n * size)?;
        let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
        store.set(id, Tensor::new(e.shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((model, store))
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(config, store)).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes)
}

/// Loads a checkpoint and checks it against `expected`.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

/// Loads a checkpoint using the configuration embedded in it.
pub fn open_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Model, ParamStore<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = decode_header(&bytes)?;
    decode(&bytes, &header.config)
}
