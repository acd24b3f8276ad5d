//! Single-file checkpoints: a JSON header followed by raw little-endian tensor data.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CDATCKPT"
//! offset 8   u32       format version (currently 1)
//! offset 12  u64       header length N in bytes
//! offset 20  N bytes   UTF-8 JSON header:
//!                      { "kind": str, "dtype": "f32"|"f64", "meta": any,
//!                        "tensors": [ { "name": str, "shape": [usize] } ... ] }
//! offset 20+N          tensor payloads in header order, row-major, dtype-sized elements
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CDATCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint; tensors are held as f64 so f32 payloads round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub dtype: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new<T: Real>(kind: &str, meta: serde_json::Value, names: Vec<String>, params: &[&Tensor<T>]) -> Self {
        assert_eq!(names.len(), params.len());
        Self {
            kind: kind.into(),
            dtype: T::NAME.into(),
            meta,
            tensors: names.into_iter().zip(params).map(|(n, p)| (n, p.cast())).collect(),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }

    /// Copies stored tensors into `params` by name, checking shapes.
    pub fn load_into<T: Real>(&self, names: &[String], params: Vec<&mut Tensor<T>>) -> Result<()> {
        if names.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((name, p), (stored_name, stored)) in names.iter().zip(params).zip(&self.tensors) {
            if name != stored_name || p.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: model {name} {:?} vs stored {stored_name} {:?}",
                    p.shape(),
                    stored.shape()
                )));
            }
            *p = stored.cast();
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            dtype: self.dtype.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for &v in t.data() {
                if self.dtype == "f32" {
                    w.write_all(&(v as f32).to_le_bytes())?;
                } else {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u8b).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(u8b) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * width];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Checkpoint(format!("truncated payload for {}", e.name)))?;
            let data: Vec<f64> = if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            dtype: header.dtype,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let t = Tensor::from_vec(&[values.len()], values.clone()).unwrap();
            let ck = Checkpoint::new("test", serde_json::json!({"a": 1}), vec!["x".into()], &[&t]);
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &ck);
            let mut out = Tensor::<f32>::zeros(&[values.len()]);
            back.load_into(&["x".to_string()], vec![&mut out]).unwrap();
            prop_assert_eq!(out.data(), values.as_slice());
        }
    }

    #[test]
    fn rejects_garbage_and_mismatches() {
        assert!(Checkpoint::read_from(&mut b"NOTACKPT\x01\0\0\0".as_slice()).is_err());
        let t = Tensor::<f64>::zeros(&[2, 2]);
        let ck = Checkpoint::new("m", serde_json::Value::Null, vec!["w".into()], &[&t]);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
        let mut wrong = Tensor::<f64>::zeros(&[3]);
        assert!(ck.load_into(&["w".to_string()], vec![&mut wrong]).is_err());
        assert!(ck.expect_kind("generator").is_err());
    }
}
