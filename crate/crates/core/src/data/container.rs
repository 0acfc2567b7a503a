//! Binary embedding container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "OSDE"
//! version      u32      1
//! feature_dim  u32
//! num_records  u64
//! per record:
//!   id         u32 length + UTF-8 bytes
//!   label      i32      (-1 = unlabeled)
//!   domain     u32 length + UTF-8 bytes
//!   feature    feature_dim x f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OSDE";
pub const FORMAT_VERSION: u32 = 1;
pub const UNLABELED: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: i32,
    pub domain: String,
    pub feature: Vec<f32>,
}

impl EmbeddingRecord {
    /// The feature widened to `f64`.
    pub fn feature_f64(&self) -> Vec<f64> {
        self.feature.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub feature_dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| Error::Malformed(format!("string of {} bytes is too long", s.len())))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serialises records into the container layout.
pub fn encode(records: &[EmbeddingRecord], feature_dim: usize) -> Result<Vec<u8>> {
    let dim = u32::try_from(feature_dim)
        .map_err(|_| Error::Malformed(format!("feature_dim {feature_dim} too large")))?;
    let mut buf = Vec::with_capacity(20 + records.len() * (feature_dim * 4 + 32));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.feature.len() != feature_dim {
            return Err(Error::DimMismatch {
                what: "record feature",
                expected: feature_dim,
                actual: r.feature.len(),
            });
        }
        if r.label < UNLABELED {
            return Err(Error::Malformed(format!("label {} below -1", r.label)));
        }
        put_str(&mut buf, &r.id)?;
        buf.extend_from_slice(&r.label.to_le_bytes());
        put_str(&mut buf, &r.domain)?;
        for x in &r.feature {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(Error::Truncated(what))?;
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self
            .take(N, what)?
            .try_into()
            .expect("slice length checked"))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Malformed(format!("{what} is not valid UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a complete container. Nothing is returned unless every record
/// parses and no trailing bytes remain.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.array("magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let feature_dim = cur.u32("feature_dim")? as usize;
    let num_records = u64::from_le_bytes(cur.array("num_records")?);

    // Each record occupies at least 12 bytes plus its feature.
    let min_record = 12 + 4 * feature_dim;
    let plausible = cur.remaining() / min_record.max(1);
    let mut records = Vec::with_capacity((num_records as usize).min(plausible));
    for _ in 0..num_records {
        let id = cur.string("record id")?;
        let label = i32::from_le_bytes(cur.array("record label")?);
        if label < UNLABELED {
            return Err(Error::Malformed(format!("label {label} below -1")));
        }
        let domain = cur.string("record domain")?;
        let raw = cur.take(4 * feature_dim, "record feature")?;
        let feature = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        records.push(EmbeddingRecord {
            id,
            label,
            domain,
            feature,
        });
    }
    if cur.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last record",
            cur.remaining()
        )));
    }
    Ok(EmbeddingFile {
        feature_dim,
        records,
    })
}

pub fn write_embeddings(
    path: impl AsRef<Path>,
    records: &[EmbeddingRecord],
    feature_dim: usize,
) -> Result<()> {
    let bytes = encode(records, feature_dim)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    decode(&fs::read(path)?)
}
