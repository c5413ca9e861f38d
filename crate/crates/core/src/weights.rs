//! CFW1 weight files.
//!
//! Layout (all integers little-endian `u32`, payload little-endian `f32`):
//!
//! ```text
//! "CFW1"
//! repeated until EOF:
//!     name_len  name[name_len]  ndim  dims[ndim]  payload[prod(dims)]
//! ```
//!
//! Names are unique within a file. Record order is preserved on read.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFW1";

/// One named tensor.
pub type Record = (String, Tensor<f32>);

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    write_records(&mut out, records).expect("writing to a Vec cannot fail");
    out
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str, record: usize) -> Result<u32> {
    let end = *pos + 4;
    let b = bytes.get(*pos..end).ok_or_else(|| {
        Error::Format(format!("CFW1 record {record}: truncated while reading {what}"))
    })?;
    *pos = end;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parse a complete CFW1 image.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not a CFW1 weight file".into()));
    }
    let mut pos = 4;
    let mut out: Vec<Record> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while pos < bytes.len() {
        let rec = out.len();
        let name_len = read_u32(bytes, &mut pos, "name length", rec)? as usize;
        let name_bytes = bytes.get(pos..pos + name_len).ok_or_else(|| {
            Error::Format(format!("CFW1 record {rec}: truncated name"))
        })?;
        pos += name_len;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| Error::Format(format!("CFW1 record {rec}: name is not UTF-8")))?;
        let ndim = read_u32(bytes, &mut pos, "ndim", rec)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(bytes, &mut pos, "dims", rec)? as usize);
        }
        let count: usize = dims.iter().product();
        let payload = bytes.get(pos..pos + count * 4).ok_or_else(|| {
            Error::Format(format!("CFW1 record {rec} ({name}): payload shorter than dims {dims:?}"))
        })?;
        pos += count * 4;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(dims, data)
            .map_err(|e| Error::Format(format!("CFW1 record {rec} ({name}): {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("CFW1 record {rec}: duplicate name {name}")));
        }
        out.push((name, t));
    }
    Ok(out)
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading CFW1 stream: {e}")))?;
    from_bytes(&bytes)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, to_bytes(records)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
