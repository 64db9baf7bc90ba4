//! Checkpoint file: `PMCKPT01`, u64 LE header length, JSON header
//! `{name: {dtype, shape, offset}}`, then little-endian tensor bytes in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::{numel, Array};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut data = Vec::new();
    for (name, p) in store.iter() {
        header.insert(
            name.to_string(),
            TensorEntry { dtype: T::DTYPE.into(), shape: p.value.shape().to_vec(), offset: data.len() as u64 },
        );
        for &v in p.value.data() {
            v.write_le(&mut data);
        }
    }
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn read_tensor<T: Scalar, S: Scalar>(bytes: &[u8], n: usize) -> Vec<T> {
    bytes.chunks_exact(S::BYTES).take(n).map(|c| T::of(S::read_le(c).as_f64())).collect()
}

/// Decode a checkpoint, converting to `T` when stored at another width.
/// All loaded parameters are trainable; callers apply their own freeze sets.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: BTreeMap<String, TensorEntry> =
        serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
    let data = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    for (name, e) in header {
        let n = numel(&e.shape);
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unsupported dtype {other}"))),
        };
        let start = e.offset as usize;
        let raw = data
            .get(start..start + n * width)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` out of bounds")))?;
        let values = if width == 4 { read_tensor::<T, f32>(raw, n) } else { read_tensor::<T, f64>(raw, n) };
        store.insert(name, Array::from_vec(&e.shape, values)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_header_data() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b.x", Array::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        s.insert("a.y", Array::scalar(0.5)).unwrap();
        let bytes = encode_checkpoint(&s).unwrap();
        assert_eq!(&bytes[..8], b"PMCKPT01");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["a.y"]["offset"], 0);
        assert_eq!(header["b.x"]["offset"], 4);
        assert_eq!(header["b.x"]["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[16 + hlen + 4..16 + hlen + 8], &1.0f32.to_le_bytes());
        let back: ParamStore<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint::<f32>(b"NOTACKPTxxxxxxxx").is_err());
    }
}
