//! Embedding Exchange files (`EMBX`), the hand-off format between an
//! external encoder and this crate.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "EMBX" | u16 version = 1 | u32 D | u64 N | N x (u64 id, D x f16)
//! ```

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `(id, embedding)` pairs as stored in an EMBX file.
pub type EmbxRecords<T> = Vec<(u64, Vec<T>)>;

pub const EMBX_MAGIC: &[u8; 4] = b"EMBX";
pub const EMBX_VERSION: u16 = 1;
/// Bytes before the first record.
pub const EMBX_HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbxMetadata {
    pub version: u16,
    pub dim: usize,
    pub count: usize,
}

/// Quantize to half precision, failing on values that do not fit.
pub(crate) fn to_f16<T: Scalar>(v: T) -> Result<f16> {
    let h = f16::from_f64(v.to_f64_lossy());
    if h.is_finite() {
        Ok(h)
    } else {
        Err(Error::format(format!(
            "value {v} is not representable in half precision"
        )))
    }
}

pub(crate) fn from_f16<T: Scalar>(h: f16) -> Result<T> {
    if h.is_finite() {
        Ok(T::from_f64_lossy(h.to_f64()))
    } else {
        Err(Error::format("non-finite half-precision value"))
    }
}

/// Little-endian cursor over a byte slice that reports truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(format!(
                    "truncated input: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f16(&mut self) -> Result<f16> {
        Ok(f16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Serialize `records` of dimension `dim`.
pub fn encode_embx<T: Scalar>(dim: usize, records: &[(u64, Vec<T>)]) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dim).map_err(|_| Error::format("dimension exceeds u32"))?;
    let mut out = Vec::with_capacity(EMBX_HEADER_LEN + records.len() * (8 + 2 * dim));
    out.extend_from_slice(EMBX_MAGIC);
    out.extend_from_slice(&EMBX_VERSION.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (id, values) in records {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: values.len(),
            });
        }
        out.extend_from_slice(&id.to_le_bytes());
        for &v in values {
            out.extend_from_slice(&to_f16(v)?.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse an Embedding Exchange buffer. Ids keep file order.
pub fn decode_embx<T: Scalar>(bytes: &[u8]) -> Result<(EmbxMetadata, EmbxRecords<T>)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EMBX_MAGIC {
        return Err(Error::format("bad magic, expected EMBX"));
    }
    let version = r.u16()?;
    if version != EMBX_VERSION {
        return Err(Error::format(format!("unsupported EMBX version {version}")));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let record_len = 8 + 2 * dim as u64;
    // A D header inconsistent with the payload shows up as a length mismatch.
    let expected = count
        .checked_mul(record_len)
        .ok_or_else(|| Error::format("record count overflows"))?;
    if expected != r.remaining() as u64 {
        return Err(Error::format(format!(
            "payload holds {} bytes but header declares {count} records of dimension {dim} ({expected} bytes)",
            r.remaining()
        )));
    }
    let count = count as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let values = (0..dim)
            .map(|_| r.f16().and_then(from_f16))
            .collect::<Result<Vec<T>>>()?;
        records.push((id, values));
    }
    Ok((
        EmbxMetadata {
            version,
            dim,
            count,
        },
        records,
    ))
}

pub fn export_embeddings<T: Scalar>(
    path: impl AsRef<Path>,
    dim: usize,
    records: &[(u64, Vec<T>)],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_embx(dim, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_embeddings<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(EmbxMetadata, EmbxRecords<T>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embx(&bytes)
}
