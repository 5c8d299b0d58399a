//! Binary tensor files.
//!
//! A single tensor is `"CTFA"`, version, dtype code, rank, little-endian `u32`
//! extents and the row-major little-endian payload. A container replaces the
//! rank byte onward with a `u32` entry count followed by entries of
//! `u16` name length, UTF-8 name, rank, extents and payload. All entries of a
//! container share its dtype.

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor, MAX_RANK};
use std::collections::HashSet;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CTFA";
pub const VERSION: u8 = 1;

fn put_body<T: Float>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_header<T: Float>(out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
}

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.len() * T::DTYPE.size());
    put_header::<T>(&mut out);
    put_body(t, &mut out);
    out
}

pub fn encode_container<T: Float>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header::<T>(&mut out);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateParam(name.clone()));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::format(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_body(t, &mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self) -> Result<DType> {
        if self.take(4)? != MAGIC {
            return Err(Error::format("bad magic, not a tensor file"));
        }
        let version = self.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        DType::from_code(self.u8()?)
    }

    fn body<T: Float>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("extent overflow"))?;
        let size = T::DTYPE.size();
        let bytes = self.take(n.checked_mul(size).ok_or_else(|| Error::format("payload overflow"))?)?;
        Tensor::new(&shape, bytes.chunks_exact(size).map(T::read_le).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn expect_dtype<T: Float>(found: DType) -> Result<()> {
    if found != T::DTYPE {
        return Err(Error::format(format!("file holds {found:?}, expected {:?}", T::DTYPE)));
    }
    Ok(())
}

/// Element type recorded in a file header.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    Reader { buf: bytes, pos: 0 }.header()
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    expect_dtype::<T>(r.header()?)?;
    let t = r.body()?;
    r.finish()?;
    Ok(t)
}

pub fn decode_container<T: Float>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    expect_dtype::<T>(r.header()?)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("entry name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateParam(name));
        }
        out.push((name, r.body()?));
    }
    r.finish()?;
    Ok(out)
}

pub fn write<T: Float>(path: &Path, t: &Tensor<T>) -> Result<()> {
    Ok(std::fs::write(path, encode(t))?)
}

pub fn read<T: Float>(path: &Path) -> Result<Tensor<T>> {
    decode(&std::fs::read(path)?)
}

pub fn write_container<T: Float>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    Ok(std::fs::write(path, encode_container(entries)?)?)
}

pub fn read_container<T: Float>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    decode_container(&std::fs::read(path)?)
}
