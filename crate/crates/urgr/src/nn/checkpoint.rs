//! Checkpoint archive: one file carrying a config JSON document and a
//! manifest of named f32 tensor records with CRC-checked payloads.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "URGRCKPT"  magic, 8 bytes
//! u32         format version (1)
//! u32 + utf8  model kind, e.g. "hqnet" or "gvit"
//! u32 + utf8  config JSON
//! u32         record count
//! per record: u32 + utf8 name, u32 ndim, u32 x ndim dims,
//!             u64 payload offset, u64 payload byte length, u32 crc32
//! payload     f32 values, row-major, concatenated
//! ```
//!
//! Tensors are stored as f32; training runs in f64 and narrows here, so
//! save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::ParamTree;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"URGRCKPT";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| bad("checkpoint truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| bad("checkpoint truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(bad(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| bad("checkpoint truncated"))?;
    String::from_utf8(buf).map_err(|_| bad("checkpoint string is not UTF-8"))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    config: &impl Serialize,
    params: &ParamTree,
) -> Result<()> {
    let config_json = serde_json::to_string(config)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, kind)?;
    write_str(&mut w, &config_json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        let offset = payload.len() as u64;
        let start = payload.len();
        for &v in tensor.iter() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let bytes = &payload[start..];
        let crc = crc32fast::hash(bytes);
        write_str(&mut w, name)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&offset.to_le_bytes())?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&crc.to_le_bytes())?;
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Load an archive, verifying magic, version, kind and every record's
/// CRC. The config JSON is deserialized into the caller's type.
pub fn load_checkpoint<C: DeserializeOwned>(
    path: impl AsRef<Path>,
    expected_kind: &str,
) -> Result<(C, ParamTree)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let kind = read_str(&mut r)?;
    if kind != expected_kind {
        return Err(bad(format!(
            "checkpoint holds a {kind} model, expected {expected_kind}"
        )));
    }
    let config_json = read_str(&mut r)?;
    let config: C = serde_json::from_str(&config_json)?;
    let n_records = read_u32(&mut r)? as usize;
    struct Record {
        name: String,
        dims: Vec<usize>,
        offset: u64,
        byte_len: u64,
        crc: u32,
    }
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(bad(format!("implausible rank {ndim} for {name}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        let byte_len = read_u64(&mut r)?;
        let crc = read_u32(&mut r)?;
        let elems: usize = dims.iter().product();
        if byte_len != (elems * 4) as u64 {
            return Err(bad(format!(
                "record {name}: {byte_len} bytes for shape {dims:?}"
            )));
        }
        records.push(Record {
            name,
            dims,
            offset,
            byte_len,
            crc,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut params = ParamTree::new();
    for rec in records {
        let start = rec.offset as usize;
        let end = start + rec.byte_len as usize;
        if end > payload.len() {
            return Err(bad(format!("record {} exceeds payload", rec.name)));
        }
        let bytes = &payload[start..end];
        if crc32fast::hash(bytes) != rec.crc {
            return Err(bad(format!(
                "record {} failed its integrity check",
                rec.name
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&rec.dims), values)
            .map_err(|e| bad(format!("record {}: {e}", rec.name)))?;
        if params.insert(rec.name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate record {}", rec.name)));
        }
    }
    Ok((config, params))
}
