use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Dense matrix of per-image embedding vectors.
///
/// `data` is row-major, one row per image. `labels`, when present, holds
/// one class id per row. `backend_name` is in-memory provenance only; the
/// on-disk format does not carry it (run reports do).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Option<Vec<u32>>,
    pub backend_name: String,
}

impl EmbeddingStore {
    pub fn new(dim: usize, data: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dim must be at least 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Dimension {
                what: "embedding store buffer".into(),
                expected: (data.len() / dim) * dim,
                got: data.len(),
            });
        }
        let count = data.len() / dim;
        if let Some(l) = &labels {
            if l.len() != count {
                return Err(Error::Dimension {
                    what: "embedding store labels".into(),
                    expected: count,
                    got: l.len(),
                });
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding store contains non-finite values".into()));
        }
        Ok(EmbeddingStore {
            dim,
            data,
            labels,
            backend_name: String::new(),
        })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            data: Vec::new(),
            labels: None,
            backend_name: String::new(),
        }
    }

    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// New store with the given rows (and labels, when present) of `self`.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        EmbeddingStore {
            dim: self.dim,
            data,
            labels,
            backend_name: self.backend_name.clone(),
        }
    }

    /// Same vectors with labels replaced (or dropped).
    pub fn with_labels(&self, labels: Option<Vec<u32>>) -> Result<Self> {
        let mut s = EmbeddingStore::new(self.dim, self.data.clone(), labels)?;
        s.backend_name = self.backend_name.clone();
        Ok(s)
    }
}

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u16 = 1;

/// Serialize a store: magic "EMBS", version u16 LE, count u32 LE, dim u32
/// LE, flags u8 (bit0 = labels present), f32 LE row-major payload, u32 LE
/// labels when flagged, CRC32 of all preceding bytes as u32 LE.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(15 + store.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.count() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.push(store.labels.is_some() as u8);
    for v in &store.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &store.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Load a store saved by [`save_store`]; bit-exact round trip.
pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 15 {
        return Err(Error::format(path, "file too short for header"));
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"EMBS\"", &buf[0..4]),
        ));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
    let dim = u32::from_le_bytes([buf[10], buf[11], buf[12], buf[13]]) as usize;
    let flags = buf[14];
    let has_labels = flags & 1 != 0;

    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "count*dim overflows"))?;
    let labels_len = if has_labels { count * 4 } else { 0 };
    let expected = 15 + payload + labels_len + 4;
    if buf.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: expected {expected} bytes, found {}", buf.len()),
        ));
    }
    if buf.len() > expected {
        return Err(Error::format(
            path,
            format!("trailing garbage: expected {expected} bytes, found {}", buf.len()),
        ));
    }

    let body = &buf[..expected - 4];
    let stored_crc = u32::from_le_bytes(buf[expected - 4..expected].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::format(
            path,
            format!("checksum mismatch: computed {crc:08x}, stored {stored_crc:08x}"),
        ));
    }

    let mut data = Vec::with_capacity(count * dim);
    let mut off = 15;
    for _ in 0..count * dim {
        data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(count);
        for _ in 0..count {
            l.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        Some(l)
    } else {
        None
    };

    if dim == 0 && count > 0 {
        return Err(Error::format(path, "zero dim with nonzero count"));
    }
    Ok(EmbeddingStore {
        dim: dim.max(1),
        data,
        labels,
        backend_name: String::new(),
    })
}
