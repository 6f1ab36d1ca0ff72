//! Binary checkpoint: a text header describing named tensors followed by
//! their values as little-endian `f64`.
//!
//! ```text
//! b"SSLCKPT\0" | u64 LE header length | JSON header | f64 LE values
//! ```
//!
//! The header lists every tensor's name, shape and element offset into the
//! value block, plus free-form metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::encoder::{EncoderParams, PARAM_NAMES, SAP_SCORING};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSLCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sap_scoring: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Contract(format!("checkpoint meta lacks integer `{key}`")))
    }

    pub fn push_encoder(&mut self, prefix: &str, params: &EncoderParams) {
        for (name, t) in PARAM_NAMES.iter().zip(&params.tensors) {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn encoder(&self, prefix: &str) -> Result<EncoderParams> {
        let tensors = PARAM_NAMES
            .iter()
            .map(|n| self.require(&format!("{prefix}.{n}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        EncoderParams::from_tensors(tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = Header {
            format: "speakerssl-checkpoint".into(),
            version: 1,
            sap_scoring: SAP_SCORING.into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let text = serde_json::to_vec_pretty(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + text.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or("truncated header")?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| format!("header: {e}"))?;
        let body = &bytes[body_start..];
        if body.len() % 8 != 0 {
            return Err("value block is not a whole number of f64".into());
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| format!("tensor `{}` out of bounds", e.name))?
                .to_vec();
            let t = Tensor::new(e.shape, data).map_err(|err| format!("tensor `{}`: {err}", e.name))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::parse(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let params = EncoderParams::init(3, 40, 8, 4).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"epoch": 3}));
        ck.push_encoder("encoder", &params);
        ck.push("odd", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        ck.push("empty", Tensor::zeros(&[0, 4]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.encoder("encoder").unwrap(), params);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.meta_u64("epoch").unwrap(), 3);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn header_is_readable_text() {
        let mut ck = Checkpoint::new(Value::Null);
        ck.push("w", Tensor::zeros(&[2, 3]));
        let bytes = ck.to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert!(text.contains("\"name\": \"w\""));
        assert!(text.contains("sap_scoring"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bytes = Checkpoint::new(Value::Null).to_bytes();
        bytes[8] = 0xff;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
