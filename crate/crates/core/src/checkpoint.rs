//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SCDN" | u32 version | [u8; 32] config hash | u32 record count
//! record: u32 name length | name (UTF-8) | u8 kind | u32 ndim | u32 dims[ndim] | f32 payload
//! [u8; 32] SHA-256 of every preceding byte
//! ```

use crate::error::{Result, ScdError};
use crate::nn::{ParamKind, ParamStore};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SCDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: ArrayD<f32>) -> Self {
        Record {
            name: name.into(),
            kind,
            value,
        }
    }

    /// Integers stored bit-for-bit inside f32 slots.
    pub fn from_u32s(name: impl Into<String>, values: &[u32]) -> Self {
        let data: Vec<f32> = values.iter().map(|v| f32::from_bits(*v)).collect();
        Record::new(name, ParamKind::Buffer, ArrayD::from_shape_vec(IxDyn(&[values.len()]), data).unwrap())
    }

    pub fn as_u32s(&self) -> Vec<u32> {
        self.value.iter().map(|v| v.to_bits()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config_hash: [u8; 32],
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Container {
            config_hash,
            records: Vec::new(),
        }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (n, p) in store.iter() {
            self.records.push(Record::new(format!("{prefix}/{n}"), p.kind, p.value.clone()));
        }
    }

    /// Every record under `prefix/`, prefix stripped, in file order.
    pub fn store(&self, prefix: &str) -> ParamStore<f32> {
        let lead = format!("{prefix}/");
        let mut out = ParamStore::new();
        for r in &self.records {
            if let Some(rest) = r.name.strip_prefix(&lead) {
                out.insert(rest, r.value.clone(), r.kind);
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| ScdError::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.kind.code());
            out.extend_from_slice(&(r.value.ndim() as u32).to_le_bytes());
            for d in r.value.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in r.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ScdError::Checkpoint(m.to_string());
        if bytes.len() < 4 + 4 + 32 + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ScdError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("content digest mismatch (corrupt file)"));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(cur.take(32)?);
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            let kind = ParamKind::from_code(cur.take(1)?[0]).ok_or_else(|| bad("unknown record kind"))?;
            let ndim = cur.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| bad("record too large"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))?;
            records.push(Record { name, kind, value });
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(Container { config_hash, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| ScdError::io(dir, e))?;
            }
        }
        fs::write(path, self.encode()).map_err(|e| ScdError::io(path, e))
    }

    /// Reads and checks the file; `expected_hash` refuses a checkpoint made
    /// under another configuration.
    pub fn load(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ScdError::io(path, e))?;
        let c = Container::decode(&bytes)?;
        if let Some(h) = expected_hash {
            if &c.config_hash != h {
                return Err(ScdError::Checkpoint(format!(
                    "config hash mismatch for {}: checkpoint was written under a different configuration",
                    path.display()
                )));
            }
        }
        Ok(c)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ScdError::Checkpoint("truncated record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new([7u8; 32]);
        let mut s = ParamStore::new();
        s.insert("a.w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 9.0]).unwrap(), ParamKind::Weight);
        s.insert("a.b", ArrayD::zeros(IxDyn(&[3])), ParamKind::Bias);
        c.push_store("theta", &s);
        c.records.push(Record::from_u32s("meta", &[u32::MAX, 0, 17]));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Container::decode(&c.encode()).unwrap();
        // bit-cast integers may be NaN patterns, so compare encodings
        assert_eq!(back.encode(), c.encode());
        assert_eq!(back.records[0], c.records[0]);
        assert_eq!(back.get("meta").unwrap().as_u32s(), vec![u32::MAX, 0, 17]);
        assert_eq!(back.store("theta").len(), 2);
    }

    #[test]
    fn header_layout() {
        let b = sample().encode();
        assert_eq!(&b[..4], b"SCDN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(&b[8..40], &[7u8; 32]);
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()), 3);
    }

    #[test]
    fn corruption_and_mismatch_are_refused() {
        let b = sample().encode();
        for i in [0usize, 5, 50, b.len() - 40, b.len() - 1] {
            let mut bad = b.clone();
            bad[i] ^= 0x10;
            assert!(Container::decode(&bad).is_err(), "flip at {i} accepted");
        }
        assert!(Container::decode(&b[..b.len() - 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.scdn");
        sample().save(&p).unwrap();
        assert!(Container::load(&p, Some(&[7u8; 32])).is_ok());
        assert!(matches!(Container::load(&p, Some(&[8u8; 32])), Err(ScdError::Checkpoint(_))));
    }
}
