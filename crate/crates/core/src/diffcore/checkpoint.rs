//! `ODHN` checkpoint container.
//!
//! Layout: magic `ODHN`, format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, then every tensor's values as little-endian floats in
//! header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

use super::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"ODHN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub producer: String,
    pub phase: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub phase: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn producer() -> String {
    format!("oncorisk {}", env!("CARGO_PKG_VERSION"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(phase: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            phase: phase.into(),
            config,
            tensors: Vec::new(),
        }
    }

    /// Copies every tensor of `store` whose name begins with `prefix`.
    pub fn add_store(&mut self, store: &ParamStore<T>, prefix: &str) {
        for (_, name, t) in store.iter() {
            if name.starts_with(prefix) {
                let plain = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
                self.tensors.push((name.to_string(), plain));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites the values of every store tensor with a same-named entry.
    /// Shapes must agree; returns how many tensors were loaded.
    pub fn load_into(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in &self.tensors {
            if !name.starts_with(prefix) {
                continue;
            }
            let Some(id) = store.id(name) else { continue };
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Version(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            producer: producer(),
            phase: self.phase.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    dtype: T::DTYPE.to_string(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * T::BYTES).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Version(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing ODHN magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..hend])?;
        let mut off = hend;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != T::DTYPE {
                return Err(bad(&format!(
                    "tensor {} stored as {}, expected {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            let end = off + n * T::BYTES;
            if end > bytes.len() {
                return Err(bad("truncated payload"));
            }
            let data = bytes[off..end].chunks(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            phase: header.phase,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_is_identical() {
        let mut store = ParamStore::<f64>::new();
        store.insert("patchnet.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap());
        store.insert("aggrformer.b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut ck = Checkpoint::new("pretrain", serde_json::json!({"d": 4}));
        ck.add_store(&store, "");
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"ODHN");
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn dtype_mismatch_is_a_version_error() {
        let mut ck = Checkpoint::<f32>::new("x", serde_json::Value::Null);
        ck.tensors.push(("a".into(), Tensor::scalar(1.0f32)));
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::Version(_))
        ));
    }

    #[test]
    fn truncated_input_is_rejected() {
        let ck = Checkpoint::<f64>::new("x", serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"NOPE").is_err());
    }
}
