//! CNTA tensor archives.
//!
//! Little-endian layout: magic `CNTA`, `u32` version (1), `u32` entry count,
//! then per entry a `u16` name length, the UTF-8 name, a `u8` dtype
//! (1 = f32, 2 = u8), a `u8` rank, one `u32` per dimension and the raw data.

use std::path::Path;

use combinet_core::Tensor;

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"CNTA";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor),
    U8 { shape: Vec<usize>, bytes: Vec<u8> },
}

impl EntryData {
    pub fn shape(&self) -> &[usize] {
        match self {
            EntryData::F32(t) => t.shape(),
            EntryData::U8 { shape, .. } => shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, t: Tensor) -> Self {
        Self {
            name: name.into(),
            data: EntryData::F32(t),
        }
    }

    pub fn bitwise_eq(&self, other: &Entry) -> bool {
        self.name == other.name
            && match (&self.data, &other.data) {
                (EntryData::F32(a), EntryData::F32(b)) => a.bits_eq(b),
                (a, b) => a == b,
            }
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(entries.len(), "entry count")?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("entry name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = e.data.shape();
        out.push(match e.data {
            EntryData::F32(_) => DTYPE_F32,
            EntryData::U8 { .. } => DTYPE_U8,
        });
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Config(format!("rank of {} exceeds 255", e.name)))?);
        for &d in shape {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        match &e.data {
            EntryData::F32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            EntryData::U8 { bytes, .. } => out.extend_from_slice(bytes),
        }
    }
    Ok(out)
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format {
                offset: start + 2,
                detail: format!("entry name is not UTF-8: {e}"),
            })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: dtype_at + 2,
                detail: format!("shape {shape:?} overflows"),
            })?;
        let data = match dtype {
            DTYPE_F32 => {
                let nbytes = numel.checked_mul(4).ok_or_else(|| Error::Format {
                    offset: r.pos,
                    detail: "entry too large".into(),
                })?;
                let raw = r.take(nbytes, "f32 data")?;
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                EntryData::F32(Tensor::new(shape, values)?)
            }
            DTYPE_U8 => EntryData::U8 {
                bytes: r.take(numel, "u8 data")?.to_vec(),
                shape,
            },
            other => {
                return Err(Error::Format {
                    offset: dtype_at,
                    detail: format!("unknown dtype {other}"),
                })
            }
        };
        entries.push(Entry { name, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn write_archive(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)?).map_err(io_err(path))
}

pub fn read_archive(path: &Path) -> Result<Vec<Entry>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}
