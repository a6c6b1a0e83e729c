//! `BVTR` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"BVTR"
//! version  u16
//! count    u32
//! table    count × { step u32, layer u32, tag u8, ndims u8, dims ndims × u32, offset u64 }
//! payload  f32 values; each entry starts `offset` bytes into the payload
//! ```

use std::io::{Read, Write};

use bachkit_core::dit::{AttentionTrace, Field};
use bachkit_core::inject::KvCache;
use bachkit_core::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"BVTR";
pub const VERSION: u16 = 1;
/// Tag of a whole clean latent (`T×H×W×C`); not a trace field.
pub const LATENT_TAG: u8 = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a BVTR container")]
    BadMagic,
    #[error("unsupported BVTR version {0}")]
    Version(u16),
    #[error("corrupt BVTR container: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] bachkit_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub step: u32,
    pub layer: u32,
    pub tag: u8,
    pub tensor: Tensor,
}

fn u32_of(x: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(x).map_err(|_| FormatError::Corrupt(format!("{what} {x} exceeds u32")))
}

pub fn write<W: Write>(mut w: W, records: &[Record]) -> Result<(), FormatError> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&u32_of(records.len(), "entry count")?.to_le_bytes());
    let mut offset = 0u64;
    for r in records {
        let dims = r.tensor.dims();
        let ndims =
            u8::try_from(dims.len()).map_err(|_| FormatError::Corrupt("too many dims".into()))?;
        head.extend_from_slice(&r.step.to_le_bytes());
        head.extend_from_slice(&r.layer.to_le_bytes());
        head.push(r.tag);
        head.push(ndims);
        for &d in dims {
            head.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * r.tensor.len() as u64;
    }
    w.write_all(&head)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for r in records {
        for x in r.tensor.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<Record>, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse(&buf)
}

pub fn parse(buf: &[u8]) -> Result<Vec<Record>, FormatError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let step = c.u32()?;
        let layer = c.u32()?;
        let tag = c.u8()?;
        let ndims = c.u8()? as usize;
        let dims = (0..ndims)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = c.u64()?;
        table.push((step, layer, tag, dims, offset));
    }
    let payload = &buf[c.pos..];
    let mut expected = 0u64;
    let mut records = Vec::with_capacity(table.len());
    for (step, layer, tag, dims, offset) in table {
        let len = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .ok_or_else(|| FormatError::Corrupt("dimension overflow".into()))?;
        if offset != expected {
            return Err(FormatError::Corrupt(format!(
                "entry offset {offset}, expected {expected}"
            )));
        }
        let bytes = len * 4;
        let end = offset
            .checked_add(bytes)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| FormatError::Corrupt("payload shorter than table".into()))?;
        let data = payload[offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        expected = end;
        records.push(Record {
            step,
            layer,
            tag,
            tensor: Tensor::new(dims, data)?,
        });
    }
    if expected != payload.len() as u64 {
        return Err(FormatError::Corrupt("trailing bytes after payload".into()));
    }
    Ok(records)
}

pub fn trace_records(trace: &AttentionTrace) -> Result<Vec<Record>, FormatError> {
    trace
        .iter()
        .map(|(k, t)| {
            Ok(Record {
                step: u32_of(k.step, "step")?,
                layer: u32_of(k.layer, "layer")?,
                tag: k.field.tag(),
                tensor: t.clone(),
            })
        })
        .collect()
}

/// Rebuilds a trace; non-field tags are skipped.
pub fn trace_from_records(records: Vec<Record>) -> AttentionTrace {
    let mut trace = AttentionTrace::new();
    for r in records {
        if let Some(field) = Field::from_tag(r.tag) {
            trace.insert(r.step as usize, r.layer as usize, field, r.tensor);
        }
    }
    trace
}

pub fn cache_records(cache: &KvCache) -> Result<Vec<Record>, FormatError> {
    let mut out = Vec::with_capacity(2 * cache.len());
    for ((s, l), e) in cache.iter() {
        for (field, t) in [(Field::Key, &e.keys), (Field::Value, &e.values)] {
            out.push(Record {
                step: u32_of(s, "step")?,
                layer: u32_of(l, "layer")?,
                tag: field.tag(),
                tensor: t.clone(),
            });
        }
    }
    Ok(out)
}

/// Refills `cache` (already scheduled and budgeted) from key/value records.
pub fn fill_cache(cache: &mut KvCache, records: Vec<Record>) -> Result<(), FormatError> {
    let mut keys = std::collections::BTreeMap::new();
    let mut values = std::collections::BTreeMap::new();
    for r in records {
        let at = (r.step as usize, r.layer as usize);
        match Field::from_tag(r.tag) {
            Some(Field::Key) => keys.insert(at, r.tensor),
            Some(Field::Value) => values.insert(at, r.tensor),
            _ => {
                return Err(FormatError::Corrupt(format!(
                    "unexpected tag {} in cache",
                    r.tag
                )))
            }
        };
    }
    for (at, k) in keys {
        let v = values
            .remove(&at)
            .ok_or_else(|| FormatError::Corrupt(format!("key without value at {at:?}")))?;
        cache.put(at.0, at.1, k, v)?;
    }
    if let Some(at) = values.keys().next() {
        return Err(FormatError::Corrupt(format!("value without key at {at:?}")));
    }
    Ok(())
}

pub fn latent_record(latent: &Tensor) -> Record {
    Record {
        step: 0,
        layer: 0,
        tag: LATENT_TAG,
        tensor: latent.clone(),
    }
}
