//! Weights archive: a flat little-endian container of named f32 tensors,
//! prefixed by a JSON blob describing the model configuration.
//!
//! ```text
//! magic        8 bytes  "C2FWGT01"
//! config_len   u32      byte length of the UTF-8 JSON config
//! config       bytes
//! count        u32      number of tensors
//! repeated count times:
//!   name_len   u32
//!   name       bytes (UTF-8)
//!   ndim       u32
//!   dims       ndim x u64
//!   data       prod(dims) x f32 (IEEE-754, little-endian)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"C2FWGT01";

pub struct Archive {
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(config_json: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Archive(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Archive(e.to_string()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Archive> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let n = c.u32()? as usize;
    let config_json = c.string(n)?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = c.string(n)?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if c.at != buf.len() {
        return Err(Error::Archive(format!("{} trailing bytes", buf.len() - c.at)));
    }
    Ok(Archive { config_json, tensors })
}

pub fn save(path: impl AsRef<Path>, config_json: &str, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode(config_json, store))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
