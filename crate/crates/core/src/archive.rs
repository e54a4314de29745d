//! Binary container for named `f32` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "CAET"
//! version      u32      1
//! meta_count   u32
//!   key_len u32, key utf-8, value_len u32, value utf-8     (meta_count times)
//! entry_count  u32
//!   name_len u32, name utf-8, dtype u8 (0 = f32),
//!   ndim u32, ndim x u64 extents, offset u64               (entry_count times)
//! payload: each entry's values as little-endian f32 starting at its offset
//! ```
//!
//! Entries are sorted by name and every offset is a multiple of 64 bytes,
//! counted from the start of the file. Readers validate the whole file
//! before returning anything.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CAET";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    pub metadata: BTreeMap<String, String>,
    pub entries: ParamStore<f32>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non utf-8 string in archive".into()))
    }
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(entries: ParamStore<f32>) -> Self {
        Self {
            metadata: BTreeMap::new(),
            entries,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Metadata value parsed as `V`, failing if missing or malformed.
    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::MissingEntry(format!("metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("metadata `{key}` has bad value `{raw}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut head, k);
            put_str(&mut head, v);
        }
        head.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        // The table size is known before offsets are assigned.
        let table: usize = self
            .entries
            .iter()
            .map(|(n, t)| 4 + n.len() + 1 + 4 + 8 * t.ndim() + 8)
            .sum();
        let mut offset = align_up(head.len() + table);
        let mut offsets = Vec::with_capacity(self.entries.len());
        for (name, t) in self.entries.iter() {
            if t.numel() == 0 {
                return Err(Error::InvalidArgument(format!("archive entry `{name}` is empty")));
            }
            put_str(&mut head, name);
            head.push(DTYPE_F32);
            head.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                head.extend_from_slice(&(d as u64).to_le_bytes());
            }
            head.extend_from_slice(&(offset as u64).to_le_bytes());
            offsets.push(offset);
            offset = align_up(offset + 4 * t.numel());
        }
        let mut out = head;
        for ((_, t), &off) in self.entries.iter().zip(&offsets) {
            out.resize(off, 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("bad archive magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("entry `{name}` has unknown dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let header_end = r.pos;
        let mut prev_end = header_end;
        for (i, (name, shape, offset)) in table.iter().enumerate() {
            if i > 0 && table[i - 1].0 >= *name {
                return Err(Error::Format(format!("entry `{name}` out of order or duplicated")));
            }
            if offset % ALIGN != 0 || *offset < prev_end {
                return Err(Error::Format(format!("entry `{name}` has bad offset {offset}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Format(format!("entry `{name}` has bad shape {shape:?}")))?;
            let end = offset
                .checked_add(numel.checked_mul(4).unwrap_or(usize::MAX))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("entry `{name}` runs past the end of the archive")))?;
            prev_end = end;
        }
        let mut entries = ParamStore::new();
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let data = bytes[offset..offset + 4 * numel]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, Tensor::from_vec(shape, data)?);
        }
        Ok(Self { metadata, entries })
    }

    /// Writes to a sibling temporary file and renames it into place, so
    /// readers never observe a partial archive.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .map_err(|_| Error::MissingEntry(name.to_string()))
    }
}
