//! Binary checkpoint container.
//!
//! Layout: `ARBC`, u32 LE version, then the body: u32 LE config length and UTF-8
//! config text, u32 LE record count, and per record a u32 LE name length, UTF-8
//! name, u8 dtype code, u8 rank, rank x u64 LE extents and a LE payload. A trailing
//! u32 LE CRC32 covers the body.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{checked_numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl RecordData {
    fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
            RecordData::U64 { .. } => DType::U64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            RecordData::F32(t) => t.shape(),
            RecordData::F64(t) => t.shape(),
            RecordData::U64 { shape, .. } => shape,
        }
    }

    /// Bitwise equality (NaN payloads included).
    pub fn bit_eq(&self, other: &RecordData) -> bool {
        match (self, other) {
            (RecordData::F32(a), RecordData::F32(b)) => a.bit_eq(b),
            (RecordData::F64(a), RecordData::F64(b)) => a.bit_eq(b),
            (a, b) => a == b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} too large for the checkpoint format")))
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, data: RecordData) {
        self.records.push(Record { name: name.into(), data });
    }

    pub fn get(&self, name: &str) -> Option<&RecordData> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.data)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        put_u32(&mut body, len_u32(self.config.len(), "config")?);
        body.extend_from_slice(self.config.as_bytes());
        put_u32(&mut body, len_u32(self.records.len(), "record count")?);
        for r in &self.records {
            put_u32(&mut body, len_u32(r.name.len(), "record name")?);
            body.extend_from_slice(r.name.as_bytes());
            body.push(r.data.dtype().code());
            let shape = r.data.shape();
            body.push(u8::try_from(shape.len()).map_err(|_| Error::Contract("record rank above 255".into()))?);
            for &e in shape {
                body.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(t) => put_tensor(&mut body, t),
                RecordData::F64(t) => put_tensor(&mut body, t),
                RecordData::U64 { data, .. } => {
                    for v in data {
                        body.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let crc = crc32fast::hash(&body);
        out.extend_from_slice(&body);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Corruption("missing ARBC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Migration {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corruption("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corruption("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Corruption("record name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Corruption(format!("unknown dtype code {code}")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| {
                    let v = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    usize::try_from(v).map_err(|_| Error::Corruption("extent overflow".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            let numel = checked_numel(&shape).map_err(|e| Error::Corruption(e.to_string()))?;
            let payload = r.take(numel.checked_mul(dtype.width()).ok_or_else(|| Error::Corruption("payload overflow".into()))?)?;
            let data = match dtype {
                DType::F32 => RecordData::F32(Tensor::from_vec(shape, read_all::<f32>(payload))?),
                DType::F64 => RecordData::F64(Tensor::from_vec(shape, read_all::<f64>(payload))?),
                DType::U64 => RecordData::U64 {
                    shape,
                    data: payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
                },
            };
            records.push(Record { name, data });
        }
        if r.pos != body.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_all<T: Scalar>(payload: &[u8]) -> Vec<T> {
    payload.chunks_exact(T::DTYPE.width()).map(T::read_le).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Corruption("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
