//! Raw little-endian tensor files with JSON sidecars.
//!
//! `<name>.bin` holds the elements in row-major order, `<name>.json` holds
//! `{"name", "shape", "dtype"}`. Writers emit `f32`; readers also accept `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// File stem for a parameter name; dots are kept, path separators are not allowed.
fn stem(name: &str) -> Result<&str> {
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(Error::Checkpoint(format!("bad tensor name {name:?}")));
    }
    Ok(name)
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F32 => tensor.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
        DType::F64 => tensor.data().iter().flat_map(|&x| x.to_le_bytes()).collect(),
    }
}

pub fn decode(bytes: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = match dtype {
        DType::F32 => {
            if bytes.len() % 4 != 0 {
                return Err(Error::Checkpoint("f32 payload not a multiple of 4 bytes".into()));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        DType::F64 => {
            if bytes.len() % 8 != 0 {
                return Err(Error::Checkpoint("f64 payload not a multiple of 8 bytes".into()));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
    };
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn write_tensor(dir: &Path, name: &str, tensor: &Tensor, dtype: DType) -> Result<()> {
    let stem = stem(name)?;
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, encode(tensor, dtype)).map_err(|e| Error::io(&bin, e))?;
    let meta = TensorMeta {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        dtype,
    };
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string(&meta).map_err(|e| Error::json(&json, e))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let stem = stem(name)?;
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: TensorMeta = serde_json::from_str(&text).map_err(|e| Error::json(&json, e))?;
    if meta.name != name {
        return Err(Error::Checkpoint(format!("sidecar names {:?}, expected {name:?}", meta.name)));
    }
    let bin = dir.join(format!("{stem}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    decode(&bytes, &meta.shape, meta.dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_payload_is_little_endian() {
        let t = Tensor::vector(vec![1.0, -2.5]);
        let bytes = encode(&t, DType::F32);
        assert_eq!(&bytes[..4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        write_tensor(dir.path(), "layers.0.w", &t, DType::F32).unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("layers.0.w.json")).unwrap()).unwrap();
        assert_eq!(meta["dtype"], "f32");
        assert_eq!(meta["shape"], serde_json::json!([2, 3]));
        let back = read_tensor(dir.path(), "layers.0.w").unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
        assert!(read_tensor(dir.path(), "missing").is_err());
    }
}
