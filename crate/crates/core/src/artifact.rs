//! The on-disk artifact container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "LDPART01"
//! header_len   u64       byte length of the header that follows
//! header       JSON      {"kind", "arrays": [{"name", "shape", "byte_len"}], "meta": {..}}
//! payload      f32 LE    arrays concatenated in header order
//! ```
//!
//! Arrays and meta entries are written in lexicographic key order, so equal
//! inputs always give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LdpError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LDPART01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(LdpError::Shape(format!(
                "array shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
    }
}

pub type ArrayMap = BTreeMap<String, NamedArray>;
pub type MetaMap = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub kind: String,
    pub arrays: ArrayMap,
    pub meta: MetaMap,
}

impl Artifact {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            arrays: ArrayMap::new(),
            meta: MetaMap::new(),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(LdpError::KindMismatch {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| LdpError::Shape(format!("artifact of kind {:?} lacks array {name:?}", self.kind)))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LdpError::Config(format!("artifact of kind {:?} lacks meta key {key:?}", self.kind)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_artifact(path, &self.kind, &self.arrays, &self.meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (kind, arrays, meta) = load_artifact(path)?;
        Ok(Self { kind, arrays, meta })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    shape: Vec<usize>,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    arrays: Vec<ArrayHeader>,
    meta: MetaMap,
}

/// Serializes `arrays` and `meta` into the artifact layout; the whole file is
/// built in memory and written once, after validation.
pub fn encode_artifact(kind: &str, arrays: &ArrayMap, meta: &MetaMap) -> Result<Vec<u8>> {
    for (name, arr) in arrays {
        if arr.shape.iter().product::<usize>() != arr.data.len() {
            return Err(LdpError::Shape(format!("array {name:?}: shape/data length mismatch")));
        }
        if let Some(i) = arr.data.iter().position(|v| !v.is_finite()) {
            return Err(LdpError::NonFinite(format!("array {name:?} at index {i}")));
        }
    }
    let header = Header {
        kind: kind.to_string(),
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayHeader {
                name: name.clone(),
                shape: a.shape.clone(),
                byte_len: a.data.len() * 4,
            })
            .collect(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serialization is infallible");
    let payload_len: usize = arrays.values().map(|a| a.data.len() * 4).sum();
    let mut buf = Vec::with_capacity(16 + header.len() + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for a in arrays.values() {
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_artifact(bytes: &[u8], path: &Path) -> Result<(String, ArrayMap, MetaMap)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(LdpError::NotArtifact { path: path.into() });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let bad = |reason: String| LdpError::BadHeader {
        path: path.into(),
        reason,
    };
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[header_end..];
    let declared: usize = header.arrays.iter().map(|a| a.byte_len).sum();
    if declared != payload.len() {
        return Err(LdpError::PayloadLengthMismatch {
            path: path.into(),
            declared,
            actual: payload.len(),
        });
    }
    let mut arrays = ArrayMap::new();
    let mut offset = 0;
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        if a.byte_len != n * 4 {
            return Err(bad(format!(
                "array {:?}: shape {:?} needs {} bytes, header says {}",
                a.name,
                a.shape,
                n * 4,
                a.byte_len
            )));
        }
        let data = payload[offset..offset + a.byte_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += a.byte_len;
        arrays.insert(a.name, NamedArray { shape: a.shape, data });
    }
    Ok((header.kind, arrays, header.meta))
}

pub fn save_artifact(
    path: impl AsRef<Path>,
    kind: &str,
    arrays: &ArrayMap,
    meta: &MetaMap,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_artifact(kind, arrays, meta)?;
    fs::write(path, bytes).map_err(|e| LdpError::io(path, e))
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<(String, ArrayMap, MetaMap)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LdpError::io(path, e))?;
    decode_artifact(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn zeros_round_trip() {
        let dir = tmp();
        let p = dir.path().join("z.ldp");
        let mut arrays = ArrayMap::new();
        arrays.insert("z".into(), NamedArray::new(vec![2, 2], vec![0.0; 4]).unwrap());
        save_artifact(&p, "test", &arrays, &MetaMap::new()).unwrap();
        let (kind, back, meta) = load_artifact(&p).unwrap();
        assert_eq!(kind, "test");
        assert_eq!(back, arrays);
        assert!(meta.is_empty());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("t.ldp");
        let mut arrays = ArrayMap::new();
        arrays.insert("a".into(), NamedArray::new(vec![4], vec![1.0; 4]).unwrap());
        save_artifact(&p, "test", &arrays, &MetaMap::new()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4); // header says 16 bytes, 12 remain
        fs::write(&p, &bytes).unwrap();
        let err = load_artifact(&p).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("bad.ldp");
        fs::write(&p, b"NOTANART\0\0\0\0\0\0\0\0").unwrap();
        let err = load_artifact(&p).unwrap_err();
        assert!(err.to_string().contains("not an LDP artifact"), "{err}");
    }

    #[test]
    fn non_finite_rejected_before_write() {
        let dir = tmp();
        let p = dir.path().join("nan.ldp");
        let mut arrays = ArrayMap::new();
        arrays.insert("a".into(), NamedArray::new(vec![2], vec![1.0, f32::NAN]).unwrap());
        assert!(matches!(
            save_artifact(&p, "test", &arrays, &MetaMap::new()),
            Err(LdpError::NonFinite(_))
        ));
        assert!(!p.exists());
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = save_artifact("/nonexistent/dir/x.ldp", "k", &ArrayMap::new(), &MetaMap::new())
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.ldp"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 0..300),
            key in "[a-z]{1,8}",
            value in ".{0,20}",
        ) {
            let data: Vec<f32> = bits
                .into_iter()
                .map(f32::from_bits)
                .filter(|v| v.is_finite())
                .collect();
            let mut arrays = ArrayMap::new();
            arrays.insert("w".into(), NamedArray::new(vec![data.len()], data).unwrap());
            let mut meta = MetaMap::new();
            meta.insert(key, value);
            let bytes = encode_artifact("prop", &arrays, &meta).unwrap();
            let (kind, back, back_meta) = decode_artifact(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(kind, "prop");
            prop_assert_eq!(&back_meta, &meta);
            let a: Vec<u32> = arrays["w"].data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back["w"].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(encode_artifact("prop", &back, &back_meta).unwrap(), bytes);
        }
    }
}
