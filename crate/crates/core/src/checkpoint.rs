//! Flat binary container of named tensors.
//!
//! The file is a plain concatenation of records, each laid out as
//!
//! ```text
//! name_len : u32 LE
//! name     : name_len bytes, UTF-8
//! rank     : u32 LE
//! dims     : rank x u64 LE
//! values   : prod(dims) x f64 LE
//! ```
//!
//! with no header or trailer. Values are stored bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn encode_tensors<'a, I>(items: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = Vec::new();
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
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
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    let mut out: Vec<(String, Tensor)> = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format {
                offset: start,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::Format {
                offset: c.pos,
                msg: format!("tensor `{name}` dimensions overflow"),
            })?;
        let raw = c.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_tensors<'a, I>(path: &Path, items: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    std::fs::write(path, encode_tensors(items))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&std::fs::read(path)?)
}
