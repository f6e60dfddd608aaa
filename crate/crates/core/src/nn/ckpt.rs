//! Versioned single-file checkpoint blobs: a magic tag, a format version,
//! an embedded JSON config, and the parameter tensors as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{validation, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_blob(
    path: impl AsRef<Path>,
    magic: &[u8; 8],
    config_json: &str,
    tensors: &[&[f64]],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(magic).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    let cfg = config_json.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(cfg).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for t in tensors {
        w.write_all(&(t.len() as u64).to_le_bytes()).map_err(io_err)?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_blob(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<(String, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        Error::Dependency(format!("checkpoint not found: {} ({e})", path.display()))
    })?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut got_magic = [0u8; 8];
    r.read_exact(&mut got_magic).map_err(io_err)?;
    if &got_magic != magic {
        return Err(validation(format!(
            "{}: wrong checkpoint type (magic {:?})",
            path.display(),
            String::from_utf8_lossy(&got_magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(validation(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io_err)?;
    let config_json = String::from_utf8(cfg)
        .map_err(|e| validation(format!("checkpoint config is not UTF-8: {e}")))?;

    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    let mut u64buf = [0u8; 8];
    for _ in 0..n_tensors {
        r.read_exact(&mut u64buf).map_err(io_err)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut t = Vec::with_capacity(len);
        let mut fbuf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut fbuf).map_err(io_err)?;
            t.push(f64::from_le_bytes(fbuf));
        }
        tensors.push(t);
    }
    Ok((config_json, tensors))
}
