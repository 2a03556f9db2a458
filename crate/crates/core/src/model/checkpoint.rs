//! Model checkpoints.
//!
//! Layout (little-endian): magic `LMTM`, u32 version, u32 length of the config
//! block followed by that many bytes of `key=value` lines, u32 tensor count,
//! then per tensor: u32 name length, UTF-8 name, u32 rank, u64 per dimension,
//! and the f32 data in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Params, ToyModel, ToyModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LMTM";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &ToyModel, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let block: String = model
        .config
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(block.as_bytes())?;
    let tensors = model.params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.data.len());
        for x in t.data {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error("truncated checkpoint"))?;
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            location: format!("byte {}", self.offset),
            message: message.into(),
        }
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ToyModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Parse {
        location: "byte 0".into(),
        message: e.to_string(),
    })?;
    let mut c = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(c.error("bad magic, expected LMTM"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.error(format!("unsupported checkpoint version {version}")));
    }
    let block_len = c.u32()? as usize;
    let block = std::str::from_utf8(c.take(block_len)?)
        .map_err(|_| c.error("config block is not UTF-8"))?;
    let map = crate::config::parse_kv(block)?;
    let config = ToyModelConfig::from_kv(&map)?;
    let mut params = Params::zeros(&config);
    let count = c.u32()? as usize;
    let mut seen = BTreeMap::new();
    {
        let mut slots: BTreeMap<String, (Vec<usize>, &mut [f64])> = params
            .tensors_mut()
            .into_iter()
            .map(|t| (t.name, (t.shape, t.data)))
            .collect();
        for _ in 0..count {
            let name_len = c.u32()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| c.error("tensor name is not UTF-8"))?;
            let rank = c.u32()? as usize;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let (expect, data) = slots
                .get_mut(&name)
                .ok_or_else(|| c.error(format!("unexpected tensor `{name}`")))?;
            if &shape != expect {
                return Err(c.error(format!(
                    "tensor `{name}` has shape {shape:?}, expected {expect:?}"
                )));
            }
            let raw = c.take(4 * data.len())?;
            for (dst, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            seen.insert(name, ());
        }
        if let Some(missing) = slots.keys().find(|k| !seen.contains_key(*k)) {
            return Err(c.error(format!("missing tensor `{missing}`")));
        }
    }
    Ok(ToyModel { config, params })
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let model = ToyModel::init(ToyModelConfig::rope(9, 8, 2, 2, 8, 3).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LMTM");
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in back.params.tensors().iter().zip(model.params.tensors()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter().zip(b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
