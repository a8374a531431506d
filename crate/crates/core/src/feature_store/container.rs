//! Binary container shared by feature bundles and checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      4 bytes   "PSTP"
//! version    u32
//! manifest   u64 length, then UTF-8 JSON
//! payload    each tensor listed in manifest["tensors"], row-major, in order,
//!            elements of type manifest["dtype"] ("f32" or "f64")
//! ```

use serde_json::{json, Map, Value};

use crate::error::FormatError;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"PSTP";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8;

/// Serialises `manifest` (a JSON object) plus tensors. The `dtype` and
/// `tensors` manifest keys are filled in here.
pub fn encode<S: Scalar>(manifest: Map<String, Value>, tensors: &[(&str, &Tensor<S>)]) -> Vec<u8> {
    let mut manifest = manifest;
    manifest.insert("dtype".into(), json!(S::DTYPE));
    manifest.insert(
        "tensors".into(),
        Value::Array(
            tensors
                .iter()
                .map(|(name, t)| json!({ "name": name, "shape": t.shape() }))
                .collect(),
        ),
    );
    let text = serde_json::to_vec_pretty(&Value::Object(manifest)).expect("json values serialise");
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * S::BYTES).sum();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + text.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A parsed container whose tensors are decoded on demand.
#[derive(Debug, Clone)]
pub struct Decoded<'a> {
    pub manifest: Map<String, Value>,
    pub dtype: String,
    entries: Vec<Entry>,
    payload: &'a [u8],
}

fn dtype_bytes(dtype: &str) -> Result<usize, FormatError> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(FormatError::Manifest(format!("unsupported dtype {other:?}"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Decoded<'_>, FormatError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    if actual < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::VersionMismatch { expected: VERSION, found: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let manifest_end = HEADER_LEN.checked_add(manifest_len).ok_or(FormatError::Truncated {
        expected: u64::MAX,
        actual,
    })?;
    if actual < manifest_end {
        return Err(FormatError::Truncated { expected: manifest_end, actual });
    }
    let text = &bytes[HEADER_LEN as usize..manifest_end as usize];
    let manifest: Value =
        serde_json::from_slice(text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let Value::Object(manifest) = manifest else {
        return Err(FormatError::Manifest("manifest is not a JSON object".into()));
    };
    let dtype = manifest
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| FormatError::Manifest("missing dtype".into()))?
        .to_string();
    let elem = dtype_bytes(&dtype)?;
    let list = manifest
        .get("tensors")
        .and_then(Value::as_array)
        .ok_or_else(|| FormatError::Manifest("missing tensor list".into()))?;
    let mut entries = Vec::with_capacity(list.len());
    let mut offset = 0usize;
    for item in list {
        let name = item
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| FormatError::Manifest("tensor entry without name".into()))?
            .to_string();
        let shape: Vec<usize> = item
            .get("shape")
            .and_then(Value::as_array)
            .and_then(|dims| dims.iter().map(|d| d.as_u64().map(|d| d as usize)).collect())
            .ok_or_else(|| FormatError::Manifest(format!("tensor {name:?} has no valid shape")))?;
        let end = shape
            .iter()
            .try_fold(elem, |acc, &d| acc.checked_mul(d))
            .and_then(|bytes| offset.checked_add(bytes))
            .ok_or_else(|| FormatError::DimMismatch(format!("tensor {name:?} shape {shape:?} overflows")))?;
        entries.push(Entry { name, shape, offset });
        offset = end;
    }
    let expected = manifest_end.saturating_add(offset as u64);
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes { expected, actual });
    }
    Ok(Decoded { manifest, dtype, entries, payload: &bytes[manifest_end as usize..] })
}

impl Decoded<'_> {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.shape.as_slice())
    }

    /// Decodes tensor `name`; `S` must match the stored dtype.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>, FormatError> {
        if self.dtype != S::DTYPE {
            return Err(FormatError::Manifest(format!(
                "stored dtype {} cannot be read as {}",
                self.dtype,
                S::DTYPE
            )));
        }
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| FormatError::Manifest(format!("missing tensor {name:?}")))?;
        let numel: usize = e.shape.iter().product();
        let bytes = &self.payload[e.offset..e.offset + numel * S::BYTES];
        let data = bytes.chunks_exact(S::BYTES).map(S::read_le).collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| FormatError::DimMismatch(err.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![3], vec![-1.0f32, 0.5, 9.0]).unwrap();
        let mut m = Map::new();
        m.insert("kind".into(), json!("test"));
        encode(m, &[("a", &a), ("b", &b)])
    }

    #[test]
    fn roundtrip() {
        let bytes = sample();
        let d = decode(&bytes).unwrap();
        assert_eq!(d.names(), vec!["a", "b"]);
        assert_eq!(d.tensor::<f32>("b").unwrap().data(), &[-1.0, 0.5, 9.0]);
        assert!(d.tensor::<f64>("a").is_err());
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = sample();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(FormatError::TrailingBytes { .. })));
        bytes.pop();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(FormatError::VersionMismatch { found: 9, .. })));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(FormatError::BadMagic { .. })));
    }
}
