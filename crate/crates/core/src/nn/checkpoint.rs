//! Versioned binary checkpoints of named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   "ALPHADCK"
//! version        u32       FORMAT_VERSION
//! manifest_len   u32
//! manifest       manifest_len bytes of UTF-8 JSON:
//!                  { "format_version": 1,
//!                    "arrays": [ { "name": "...", "shape": [..] }, ... ],
//!                    "meta": { ... } }
//! then, for every array in manifest order:
//!   name_len     u32
//!   name         name_len bytes UTF-8
//!   ndim         u32
//!   dims         ndim × u64
//!   data         prod(dims) × f64 (IEEE-754 binary64)
//! ```
//!
//! Each array's inline header must agree with its manifest entry.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ALPHADCK";
pub const FORMAT_VERSION: u32 = 1;

// Guards against absurd allocations from a corrupt header.
const MAX_MANIFEST_BYTES: u32 = 64 << 20;
const MAX_ARRAY_ELEMS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("missing array '{0}'")]
    MissingArray(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name: name.into(), shape, data }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
    pub meta: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arrays: Vec<ManifestEntry>,
    meta: Map<String, Value>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedArray, CheckpointError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(CheckpointError::Malformed(format!("array '{}' shape does not match data", a.name)));
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            arrays: self.arrays.iter().map(|a| ManifestEntry { name: a.name.clone(), shape: a.shape.clone() }).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &a.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = read_u32(&mut r)?;
        if len > MAX_MANIFEST_BYTES {
            return Err(CheckpointError::Malformed(format!("manifest length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        read_exact(&mut r, &mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        if manifest.format_version != version {
            return Err(CheckpointError::Malformed("manifest version disagrees with header".into()));
        }

        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in manifest.arrays {
            let name_len = read_u32(&mut r)?;
            if name_len as usize != entry.name.len() {
                return Err(CheckpointError::Malformed(format!("name length mismatch for '{}'", entry.name)));
            }
            let mut name = vec![0u8; name_len as usize];
            read_exact(&mut r, &mut name)?;
            if name != entry.name.as_bytes() {
                return Err(CheckpointError::Malformed(format!("array name mismatch for '{}'", entry.name)));
            }
            let ndim = read_u32(&mut r)? as usize;
            if ndim != entry.shape.len() {
                return Err(CheckpointError::Malformed(format!("rank mismatch for '{}'", entry.name)));
            }
            let mut count: u64 = 1;
            for &expected in &entry.shape {
                let d = read_u64(&mut r)?;
                if d != expected as u64 {
                    return Err(CheckpointError::Malformed(format!("shape mismatch for '{}'", entry.name)));
                }
                count = count.saturating_mul(d);
            }
            if count > MAX_ARRAY_ELEMS {
                return Err(CheckpointError::Malformed(format!("array '{}' too large", entry.name)));
            }
            let mut bytes = vec![0u8; count as usize * 8];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push(NamedArray { name: entry.name, shape: entry.shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self { arrays, meta: manifest.meta })
    }

    /// Write atomically: to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            self.write_to(io::BufWriter::new(f))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated".into()),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("epoch".into(), Value::from(3));
        Checkpoint {
            arrays: vec![
                NamedArray::new("layer0.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 1e300]),
                NamedArray::new("layer0.bias", vec![2], vec![0.25, -0.5]),
            ],
            meta,
        }
    }

    #[test]
    fn byte_layout_is_documented_one() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"ALPHADCK");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let mlen = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&buf[16..16 + mlen]).unwrap();
        assert_eq!(manifest["arrays"][0]["name"], "layer0.weight");
        assert_eq!(manifest["arrays"][0]["shape"], serde_json::json!([2, 3]));
        let mut off = 16 + mlen;
        assert_eq!(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()), 13);
        off += 4 + 13;
        assert_eq!(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()), 2);
        off += 4;
        assert_eq!(u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[off + 8..off + 16].try_into().unwrap()), 3);
        off += 16;
        assert_eq!(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), 1.0);
        // 6 weights, then the bias record: 4 + 11 + 4 + 8 + 16.
        assert_eq!(buf.len(), off + 48 + 4 + 11 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(CheckpointError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(CheckpointError::Version(9))));
        assert!(matches!(Checkpoint::read_from(&buf[..buf.len() - 3]), Err(CheckpointError::Malformed(_))));
        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(CheckpointError::Malformed(_))));
        assert!(Checkpoint::read_from(&[][..]).is_err());
    }

    #[test]
    fn missing_array_lookup() {
        assert!(matches!(sample().get("nope"), Err(CheckpointError::MissingArray(_))));
    }

    proptest! {
        #[test]
        fn round_trip(data in proptest::collection::vec(any::<f64>().prop_filter("not nan", |v| !v.is_nan()), 0..64), tag in "[a-z]{1,8}") {
            let mut meta = Map::new();
            meta.insert("tag".into(), Value::from(tag.clone()));
            let ck = Checkpoint { arrays: vec![NamedArray::new(tag, vec![data.len()], data)], meta };
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            prop_assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ck);
        }
    }
}
