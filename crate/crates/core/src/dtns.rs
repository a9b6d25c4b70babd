//! DTNS tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"DTNS" | u32 header_len | header_len bytes of UTF-8 JSON | payload
//! ```
//!
//! The header is `{"dtype": "f32"|"f64", "shape": [...], "names": [...]}`
//! plus an optional free-form `"meta"` object. The payload is the row-major
//! tensor, exactly `product(shape) * sizeof(dtype)` bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DTNS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Axis names, one per dimension (may be empty).
    #[serde(default)]
    pub names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Data::F32(_) => Dtype::F32,
            Data::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub header: Header,
    pub data: Data,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, names: Vec<String>, data: Data) -> Result<Self> {
        let header = Header { dtype: data.dtype(), shape, names, meta: None };
        let t = Tensor { header, data };
        t.validate()?;
        Ok(t)
    }

    pub fn f32(shape: &[usize], names: &[&str], values: Vec<f32>) -> Result<Self> {
        Self::new(shape.to_vec(), names.iter().map(|s| s.to_string()).collect(), Data::F32(values))
    }

    pub fn f64(shape: &[usize], names: &[&str], values: Vec<f64>) -> Result<Self> {
        Self::new(shape.to_vec(), names.iter().map(|s| s.to_string()).collect(), Data::F64(values))
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.header.meta = Some(meta);
        self
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.dtype != self.data.dtype() {
            return Err(Error::Format("dtype does not match payload".into()));
        }
        if !h.names.is_empty() && h.names.len() != h.shape.len() {
            return Err(Error::Format(format!("{} names for {} axes", h.names.len(), h.shape.len())));
        }
        let n = element_count(&h.shape).ok_or_else(|| Error::Format("shape product overflows".into()))?;
        if n != self.data.len() {
            return Err(Error::Format(format!("shape {:?} holds {n} values, payload has {}", h.shape, self.data.len())));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len() * self.header.dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        match &self.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing DTNS magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if header_len > body.len() {
            return Err(Error::Format(format!("header length {header_len} exceeds file")));
        }
        let header_text = std::str::from_utf8(&body[..header_len]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let header: Header = serde_json::from_str(header_text).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &body[header_len..];

        let n = element_count(&header.shape).ok_or_else(|| Error::Format("shape product overflows".into()))?;
        let expected = n.checked_mul(header.dtype.size()).ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!("payload is {} bytes, header implies {expected}", payload.len())));
        }
        let data = match header.dtype {
            Dtype::F32 => Data::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            Dtype::F64 => Data::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        let t = Tensor { header, data };
        t.validate()?;
        Ok(t)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::f32(&[2], &["x"], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes().unwrap();
        let header = br#"{"dtype":"f32","shape":[2],"names":["x"]}"#;
        assert_eq!(&bytes[..4], b"DTNS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize, header.len());
        assert_eq!(&bytes[8..8 + header.len()], header);
        assert_eq!(&bytes[8 + header.len()..8 + header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 8 + header.len() + 8);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Tensor::from_bytes(b"DTN").is_err());
        assert!(Tensor::from_bytes(b"XXXX\0\0\0\0").is_err());
        let mut bytes = Tensor::f64(&[1, 2], &[], vec![0.0, 1.0]).unwrap().to_bytes().unwrap();
        bytes.push(0);
        assert!(Tensor::from_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 2);
        assert!(Tensor::from_bytes(&bytes).is_err());
        let huge = br#"{"dtype":"f64","shape":[4294967296,4294967296,4294967296],"names":[]}"#;
        let mut b = b"DTNS".to_vec();
        b.extend_from_slice(&(huge.len() as u32).to_le_bytes());
        b.extend_from_slice(huge);
        assert!(Tensor::from_bytes(&b).is_err());
        assert!(Tensor::f32(&[3], &[], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>(), wide in any::<bool>()) {
            let n = rows * cols;
            let vals: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) | 1) ).map(|v| if v.is_nan() { 0.5 } else { v }).collect();
            let t = if wide {
                Tensor::f64(&[rows, cols], &["r", "c"], vals).unwrap()
            } else {
                Tensor::f32(&[rows, cols], &["r", "c"], vals.iter().map(|&v| v as f32).collect()).unwrap()
            }.with_meta(serde_json::json!({"variant": "merge"}));
            let back = Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), t.to_bytes().unwrap());
        }
    }
}
