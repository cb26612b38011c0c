//! Binary parameter checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   4 bytes  "EVCK"
//! version u32
//! count   u32
//! repeat count times:
//!   name_len u16, name utf-8 bytes
//!   group    u8 (0 = encoder, 1 = rest)
//!   ndim     u8, dims u32 each
//!   data     f64 per element
//! ```
//!
//! Saving and loading round-trips bitwise; files are written to a temp path
//! and renamed so an interrupted writer never leaves a torn checkpoint.

use super::params::{ParamGroup, ParamStore};
use crate::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EVCK";

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("parameter name too long: {}", p.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(match p.group {
            ParamGroup::Encoder => 0,
            ParamGroup::Rest => 1,
        });
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Validation(format!(
                "{}: truncated checkpoint at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads a checkpoint into a fresh store.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Validation(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Validation(format!("{}: bad parameter name: {}", path.display(), e)))?;
        let group = match r.u8()? {
            0 => ParamGroup::Encoder,
            1 => ParamGroup::Rest,
            g => {
                return Err(Error::Validation(format!(
                    "{}: unknown parameter group {}",
                    path.display(),
                    g
                )))
            }
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, shape, data, group)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Validation(format!(
            "{}: {} trailing bytes after checkpoint payload",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

/// Copies values from `loaded` into `target`, requiring identical names,
/// order, and shapes. Catches model/checkpoint mismatches at load time.
pub fn apply_checkpoint(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for (dst, src) in target.iter_mut().zip(loaded.iter()) {
        if dst.name != src.name || dst.shape != src.shape {
            return Err(Error::Validation(format!(
                "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                src.name, src.shape, dst.name, dst.shape
            )));
        }
        dst.data.clone_from(&src.data);
    }
    Ok(())
}
