//! Shared little-endian record container behind the `MFFB`, `MFUC` and
//! `MFAD` formats.
//!
//! ```text
//! magic [4] | version u32 | format header (format specific, fixed layout)
//! record_count u32
//! index: record_count × { name_len u32, name utf-8, kind u8, offset u64, length u64 }
//! payloads, in index order; offsets are absolute
//!   kind 0 (tensor): rank u8 (≥ 1), dims u64 × rank, f32 × Π dims
//!   kind 1 (blob):   raw bytes (UTF-8 JSON for metadata)
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const KIND_TENSOR: u8 = 0;
const KIND_BLOB: u8 = 1;

pub(crate) struct ContainerWriter {
    head: Vec<u8>,
    records: Vec<(String, u8, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut head = Vec::with_capacity(64);
        head.extend_from_slice(magic);
        head.extend_from_slice(&version.to_le_bytes());
        ContainerWriter {
            head,
            records: Vec::new(),
        }
    }

    pub fn header_u8(&mut self, v: u8) {
        self.head.push(v);
    }

    pub fn header_u32(&mut self, v: u32) {
        self.head.extend_from_slice(&v.to_le_bytes());
    }

    pub fn header_u64(&mut self, v: u64) {
        self.head.extend_from_slice(&v.to_le_bytes());
    }

    pub fn tensor(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        let mut p = Vec::with_capacity(1 + 8 * t.rank() + 4 * t.len());
        p.push(t.rank() as u8);
        for &d in t.shape() {
            p.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            p.extend_from_slice(&v.to_le_bytes());
        }
        self.records.push((name.into(), KIND_TENSOR, p));
    }

    pub fn blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.records.push((name.into(), KIND_BLOB, bytes));
    }

    pub fn finish(self) -> Vec<u8> {
        let index_len: usize = self
            .records
            .iter()
            .map(|(n, _, _)| 4 + n.len() + 1 + 8 + 8)
            .sum();
        let payload_len: usize = self.records.iter().map(|(_, _, p)| p.len()).sum();
        let mut out = Vec::with_capacity(self.head.len() + 4 + index_len + payload_len);
        out.extend_from_slice(&self.head);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut offset = (self.head.len() + 4 + index_len) as u64;
        for (name, kind, payload) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*kind);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, _, payload) in &self.records {
            out.extend_from_slice(payload);
        }
        out
    }
}

/// Bounds-checked little-endian cursor; every failure reports its offset.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn at(bytes: &'a [u8], pos: usize) -> Self {
        Cursor { bytes, pos }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!(
                        "truncated: need {n} bytes, {} remain",
                        self.bytes.len().saturating_sub(self.pos)
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A `u64` that must fit in `usize` and not exceed `limit`.
    pub fn len_u64(&mut self, limit: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= limit)
            .ok_or_else(|| Error::format(at, format!("{what} {v} exceeds {limit}")))
    }
}

struct Entry {
    kind: u8,
    offset: usize,
    length: usize,
}

pub(crate) struct ContainerReader<'a> {
    bytes: &'a [u8],
    index: HashMap<String, Entry>,
}

impl<'a> ContainerReader<'a> {
    /// Checks magic and version, hands the cursor to `header` for the
    /// format-specific fields, then parses the record index.
    pub fn open<H>(
        bytes: &'a [u8],
        magic: &[u8; 4],
        version: u32,
        header: impl FnOnce(&mut Cursor<'a>) -> Result<H>,
    ) -> Result<(H, Self)> {
        let mut cur = Cursor::new(bytes);
        let got = cur.take(4)?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let v = cur.u32()?;
        if v != version {
            return Err(Error::format(
                4,
                format!("unsupported version {v}, expected {version}"),
            ));
        }
        let h = header(&mut cur)?;
        let count_at = cur.pos();
        let count = cur.u32()? as usize;
        // smallest possible index entry is 21 bytes
        if count > bytes.len() / 21 {
            return Err(Error::format(
                count_at,
                format!("record count {count} cannot fit in {} bytes", bytes.len()),
            ));
        }
        let mut index = HashMap::with_capacity(count);
        for _ in 0..count {
            let at = cur.pos();
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format(at + 4, "record name is not UTF-8"))?
                .to_owned();
            let kind_at = cur.pos();
            let kind = cur.u8()?;
            if kind != KIND_TENSOR && kind != KIND_BLOB {
                return Err(Error::format(
                    kind_at,
                    format!("unknown record kind {kind}"),
                ));
            }
            let offset = cur.len_u64(bytes.len(), "record offset")?;
            let length = cur.len_u64(bytes.len() - offset, "record length")?;
            if index.contains_key(&name) {
                return Err(Error::format(at, format!("duplicate record {name:?}")));
            }
            index.insert(
                name,
                Entry {
                    kind,
                    offset,
                    length,
                },
            );
        }
        Ok((h, ContainerReader { bytes, index }))
    }

    fn entry(&self, name: &str, kind: u8) -> Result<&Entry> {
        let e = self
            .index
            .get(name)
            .ok_or_else(|| Error::format(self.bytes.len(), format!("missing record {name:?}")))?;
        if e.kind != kind {
            return Err(Error::format(
                e.offset,
                format!("record {name:?} has kind {}, expected {kind}", e.kind),
            ));
        }
        Ok(e)
    }

    pub fn blob(&self, name: &str) -> Result<&'a [u8]> {
        let e = self.entry(name, KIND_BLOB)?;
        Ok(&self.bytes[e.offset..e.offset + e.length])
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let e = self.entry(name, KIND_BLOB)?;
        serde_json::from_slice(self.blob(name)?)
            .map_err(|err| Error::format(e.offset, format!("record {name:?}: {err}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self.entry(name, KIND_TENSOR)?;
        let region = &self.bytes[..e.offset + e.length];
        let mut cur = Cursor::at(region, e.offset);
        let rank = cur.u8()? as usize;
        if rank == 0 {
            return Err(Error::format(
                e.offset,
                format!("record {name:?} has rank 0; tensors need rank ≥ 1"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let at = cur.pos();
            let d = cur.len_u64(e.length, "dimension")?;
            if d == 0 {
                return Err(Error::format(
                    at,
                    format!("record {name:?} has a zero extent"),
                ));
            }
            count = count
                .checked_mul(d)
                .filter(|&c| c <= e.length / 4)
                .ok_or_else(|| Error::format(at, format!("record {name:?} dims exceed payload")))?;
            shape.push(d);
        }
        let expected = 1 + 8 * rank + 4 * count;
        if expected != e.length {
            return Err(Error::format(
                e.offset,
                format!(
                    "record {name:?} is {} bytes, shape {shape:?} needs {expected}",
                    e.length
                ),
            ));
        }
        let raw = cur.take(4 * count)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                e.offset + 1 + 8 * rank + 4 * bad,
                format!("record {name:?} holds a non-finite value"),
            ));
        }
        Tensor::new(shape, data)
    }
}
