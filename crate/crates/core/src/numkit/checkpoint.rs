//! Flat binary container for named tensors.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic   4 bytes  "CSFD"
//! version u32      currently 1
//! then per tensor, until end of file:
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank, values f64 x prod(dims)
//! ```
//!
//! Records preserve their write order, so a round trip is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CSFD";
pub const VERSION: u32 = 1;

/// One named tensor as raw data: `(name, shape, row-major values)`.
pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    out(&MAGIC)?;
    out(&VERSION.to_le_bytes())?;
    for (name, shape, values) in tensors {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue("checkpoint save"));
        }
        out(&(name.len() as u32).to_le_bytes())?;
        out(name.as_bytes())?;
        out(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out(&(d as u64).to_le_bytes())?;
        }
        for &v in values {
            out(&v.to_le_bytes())?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }

    let mut tensors = Vec::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first) {
            Ok(0) => break,
            Ok(4) => {}
            Ok(n) => {
                // a partial length prefix means the file was truncated
                let mut rest = [0u8; 4];
                let got = r
                    .read(&mut rest[..4 - n])
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                if got < 4 - n {
                    return Err(Error::Format(format!("{}: truncated record", path.display())));
                }
                first[n..].copy_from_slice(&rest[..4 - n]);
            }
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(read_f64(&mut r, path)?);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!(
                "{}: tensor {name} holds non-finite values",
                path.display()
            )));
        }
        tensors.push((name, shape, values));
    }
    Ok(tensors)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("{}: truncated file", path.display()))
        } else {
            Error::io(path.display().to_string(), e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}
