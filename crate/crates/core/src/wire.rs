//! Tensor container used by feature bundles and fusion weights.
//!
//! Layout: one JSON header line terminated by `\n`, then the raw little-endian
//! row-major `f32` payload of every declared tensor in header order, then an
//! optional JSON trailer line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn f32(name: &str, shape: &[usize]) -> Self {
        TensorSpec {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireHeader {
    pub format: String,
    pub version: u64,
    pub tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<Value>,
}

/// A decoded container: tensors are widened to `f64`.
#[derive(Debug, Clone)]
pub struct WireFile {
    pub header: WireHeader,
    pub tensors: Vec<Vec<f64>>,
    pub trailer: Option<Value>,
}

impl WireFile {
    pub fn tensor(&self, name: &str) -> Option<(&TensorSpec, &[f64])> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .find(|(s, _)| s.name == name)
            .map(|(s, t)| (s, t.as_slice()))
    }

    /// Fetches a tensor and checks its declared shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (spec, data) = self.tensor(name).ok_or_else(|| Error::Shape {
            field: name.to_string(),
            expected: shape.to_vec(),
            found: vec![],
        })?;
        if spec.shape != shape {
            return Err(Error::Shape {
                field: name.to_string(),
                expected: shape.to_vec(),
                found: spec.shape.clone(),
            });
        }
        Ok(data)
    }
}

pub fn encode(
    format: &str,
    tensors: &[(TensorSpec, &[f64])],
    pipeline: Option<Value>,
    trailer: Option<&Value>,
) -> Result<Vec<u8>> {
    let header = WireHeader {
        format: format.to_string(),
        version: WIRE_VERSION as u64,
        tensors: tensors.iter().map(|(s, _)| s.clone()).collect(),
        pipeline,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (spec, data) in tensors {
        if spec.numel() != data.len() {
            return Err(Error::Shape {
                field: spec.name.clone(),
                expected: spec.shape.clone(),
                found: vec![data.len()],
            });
        }
        out.reserve(data.len() * 4);
        for v in *data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(t) = trailer {
        out.extend(serde_json::to_vec(t)?);
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], format: &str) -> Result<WireFile> {
    let header_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::invalid("missing header line terminator"))?;
    let raw: Value = serde_json::from_slice(&bytes[..header_end])?;
    let found_format = raw.get("format").and_then(Value::as_str).unwrap_or("");
    if found_format != format {
        return Err(Error::Format {
            expected: format.into(),
            found: found_format.into(),
        });
    }
    let version = raw.get("version").and_then(Value::as_u64).unwrap_or(0);
    if version != WIRE_VERSION as u64 {
        return Err(Error::Version {
            format: format.into(),
            expected: WIRE_VERSION,
            found: version,
        });
    }
    let header: WireHeader = serde_json::from_value(raw)?;

    let payload_start = header_end + 1;
    let mut offset = payload_start;
    let total: usize = header.tensors.iter().map(|s| s.numel() * 4).sum();
    if bytes.len() < payload_start + total {
        return Err(Error::Truncated {
            payload_start,
            expected_end: payload_start + total,
            actual_len: bytes.len(),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for spec in &header.tensors {
        if spec.dtype != "f32" {
            return Err(Error::invalid(format!(
                "tensor `{}` has unsupported dtype {}",
                spec.name, spec.dtype
            )));
        }
        let n = spec.numel();
        let data = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += n * 4;
        tensors.push(data);
    }

    let rest = &bytes[offset..];
    let trailer = if rest.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(serde_json::from_slice(rest).map_err(|e| {
            Error::invalid(format!("malformed trailer at byte offset {offset}: {e}"))
        })?)
    };
    Ok(WireFile {
        header,
        tensors,
        trailer,
    })
}

pub fn read(path: impl AsRef<Path>, format: &str) -> Result<WireFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, format)
}

pub fn write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds every value to the nearest `f32` so it survives the payload encoding.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let a = [1.0, -2.5, 3.25];
        let b = [0.5; 4];
        let bytes = encode(
            "test",
            &[
                (TensorSpec::f32("a", &[3]), &a),
                (TensorSpec::f32("b", &[2, 2]), &b),
            ],
            None,
            Some(&serde_json::json!({"k": 1})),
        )
        .unwrap();
        let file = decode(&bytes, "test").unwrap();
        assert_eq!(file.expect("a", &[3]).unwrap(), &a);
        assert_eq!(file.expect("b", &[2, 2]).unwrap(), &b);
        assert_eq!(file.trailer.unwrap()["k"], 1);
    }

    #[test]
    fn truncation_reports_offsets() {
        let a = [1.0; 8];
        let bytes = encode("test", &[(TensorSpec::f32("a", &[8]), &a)], None, None).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match decode(cut, "test") {
            Err(Error::Truncated {
                payload_start,
                expected_end,
                actual_len,
            }) => {
                assert_eq!(expected_end - payload_start, 32);
                assert_eq!(actual_len, cut.len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_format_and_version() {
        let bytes = encode("one", &[], None, None).unwrap();
        assert!(matches!(decode(&bytes, "two"), Err(Error::Format { .. })));
        let text = String::from_utf8(bytes)
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            decode(text.as_bytes(), "one"),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
