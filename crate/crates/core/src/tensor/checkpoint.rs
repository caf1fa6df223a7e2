//! `MSCNN1` checkpoint container.
//!
//! Layout (all integers u64 little-endian, all values f64 little-endian):
//!
//! ```text
//! "MSCNN1"
//! header_len, header bytes (UTF-8 architecture description)
//! repeated until EOF:
//!     name_len, name bytes, rank, extents[rank], values[prod(extents)]
//! ```

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 6] = b"MSCNN1";

/// Sanity bound on any single length field, to reject corrupt files early.
const MAX_LEN: u64 = 1 << 34;

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, header: &str, params: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u64(w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    for (name, t) in params {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(w, t.shape().len() as u64)?;
        for &e in t.shape() {
            write_u64(w, e as u64)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Parsed checkpoint: architecture header and named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        if v > MAX_LEN {
            return corrupt(format!("implausible {what}: {v}"));
        }
        Ok(v)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return corrupt("bad magic, not an MSCNN1 checkpoint");
    }
    let hlen = cur.u64("header length")? as usize;
    let header = String::from_utf8(cur.take(hlen, "header")?.to_vec())
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut params = Vec::new();
    while !cur.done() {
        let nlen = cur.u64("name length")? as usize;
        let name = String::from_utf8(cur.take(nlen, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = cur.u64("rank")? as usize;
        if rank > 8 {
            return corrupt(format!("rank {rank} for {name}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = cur.take(n * 8, "values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(Checkpoint { header, params })
}
