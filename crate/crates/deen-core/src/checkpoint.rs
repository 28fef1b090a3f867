//! Model checkpoint file format.
//!
//! Byte layout (little-endian throughout):
//!
//! ```text
//! magic "DCKP", u32 version (1)
//! u64 config JSON length, config JSON bytes
//! u32 entry count, then per entry:
//!   u16 name length, name bytes (UTF-8)
//!   u8 trainable flag
//!   u32 ndim, u64 dims
//!   f64 values, f64 momentum state (same length)
//! ```
//!
//! Save/load round-trips bit-exactly, including optimizer state, so a
//! restarted run continues from identical numbers.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::{Model, ModelConfig};
use crate::error::{DeenError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| DeenError::Format(format!("config serialization: {e}")))?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let entries = model.store.entries();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.trainable as u8])?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in e.data.borrow().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in e.velocity.borrow().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DeenError::Format("checkpoint: bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(DeenError::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let clen = read_u64(r)? as usize;
    let mut cbuf = vec![0u8; clen];
    r.read_exact(&mut cbuf)?;
    let config: ModelConfig = serde_json::from_slice(&cbuf)
        .map_err(|e| DeenError::Format(format!("checkpoint: bad config JSON: {e}")))?;
    config.validate()?;
    let n_entries = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n_entries {
        let name_len = read_u16(r)? as usize;
        let mut nbuf = vec![0u8; name_len];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| DeenError::Format("checkpoint: non-UTF8 parameter name".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f64s(r, numel)?;
        let velocity = read_f64s(r, numel)?;
        if flag[0] != 0 {
            store.add_param(&name, &shape, data);
        } else {
            store.add_buffer(&name, &shape, data);
        }
        *store.get(&name)?.velocity.borrow_mut() = velocity;
    }
    Ok(Model { config, store })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| {
        DeenError::Data(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    read_checkpoint(&mut r)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
