//! Flat binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"URSK"  u32 version
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8), u32 rank, rank x u64 extents,
//!   prod(extents) x f64 payload
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::param::{Module, Parameter};

pub const MAGIC: &[u8; 4] = b"URSK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint record {index}: {detail}")]
    Corrupt { index: usize, detail: String },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_records<W: Write>(mut w: W, params: &[&Parameter]) -> Result<(), CheckpointError> {
    let mut seen = std::collections::HashSet::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in params {
        if !seen.insert(p.name()) {
            return Err(CheckpointError::Duplicate(p.name().to_string()));
        }
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for &e in p.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated record")),
            n => filled += n,
        }
    }
    Ok(true)
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut out = Vec::new();
    loop {
        let index = out.len();
        let corrupt = |e: io::Error| CheckpointError::Corrupt { index, detail: e.to_string() };
        if !read_exact_or_eof(&mut r, &mut u32buf).map_err(corrupt)? {
            break;
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name)
            .map_err(|e| CheckpointError::Corrupt { index, detail: e.to_string() })?;
        r.read_exact(&mut u32buf).map_err(corrupt)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64buf).map_err(corrupt)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(corrupt)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        out.push(Record { name, shape, data });
    }
    Ok(out)
}

pub fn save<M: Module + ?Sized>(module: &M, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    write_records(io::BufWriter::new(file), &module.parameters())
}

pub fn load(path: &Path) -> Result<Vec<Record>, CheckpointError> {
    let file = std::fs::File::open(path)?;
    read_records(io::BufReader::new(file))
}

/// Copy checkpoint values into every parameter of `module` whose name starts
/// with `prefix` (empty prefix: all). Returns how many were restored.
pub fn restore<M: Module + ?Sized>(module: &mut M, records: &[Record], prefix: &str) -> Result<usize, CheckpointError> {
    let by_name: BTreeMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut n = 0;
    for p in module.parameters_mut() {
        if !p.name().starts_with(prefix) {
            continue;
        }
        let rec = by_name.get(p.name()).ok_or_else(|| CheckpointError::Missing(p.name().to_string()))?;
        if rec.shape != p.shape() {
            return Err(CheckpointError::Shape {
                name: p.name().to_string(),
                expected: p.shape().to_vec(),
                found: rec.shape.clone(),
            });
        }
        p.set_data(rec.data.clone()).expect("shape checked above");
        n += 1;
    }
    Ok(n)
}
