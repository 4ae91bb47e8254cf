//! Tensor container: a text manifest followed by raw little-endian data.
//!
//! ```text
//! VTC 1
//! meta step 200
//! tensor stage3.block0.attn.q.weight f32 192,192 0 147456 <sha256>
//! data 147456
//! <bytes>
//! ```
//!
//! Offsets are relative to the first byte after the `data` line. Every
//! tensor carries a SHA-256 of its bytes so corruption is caught per tensor.

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Scalar, Tensor};

const MAGIC: &str = "VTC 1";

/// A tensor stored as bytes, independent of element type.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        RawTensor {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`; the stored dtype must be `T`'s.
    pub fn to_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::integrity(
                name,
                format!("stored as {}, requested {}", self.dtype, T::DTYPE),
            ));
        }
        let size = T::DTYPE.size_of();
        let data = self.bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Ordered collection of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: IndexMap<String, String>,
    pub tensors: IndexMap<String, RawTensor>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Contract(format!("{kind} {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::integrity(format!("meta:{key}"), "missing header field"))
    }

    /// Adds or replaces a tensor.
    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.insert(name.to_string(), RawTensor::from_tensor(t));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::integrity(name, "tensor not present"))?
            .to_tensor(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Contract(format!("meta value for {k} contains a newline")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let shape = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
            let digest = hex::encode(Sha256::digest(&t.bytes));
            head.push_str(&format!(
                "tensor {name} {} {shape} {offset} {} {digest}\n",
                t.dtype,
                t.bytes.len()
            ));
            offset += t.bytes.len();
        }
        head.push_str(&format!("data {offset}\n"));
        let mut out = head.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = |detail: String| Error::integrity("manifest", detail);
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<&str> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| manifest("unterminated header".into()))?;
            *pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| manifest("header is not UTF-8".into()))
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(manifest("bad magic line".into()));
        }
        struct Entry {
            name: String,
            dtype: DType,
            shape: Vec<usize>,
            offset: usize,
            len: usize,
            digest: String,
        }
        let mut c = Container::new();
        let mut entries = Vec::new();
        let total = loop {
            let line = next_line(&mut pos)?;
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    c.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 6 {
                        return Err(manifest(format!("malformed tensor line {line:?}")));
                    }
                    let name = f[0].to_string();
                    let bad = |what: &str| Error::integrity(f[0], format!("bad {what} in manifest"));
                    let dtype = DType::parse(f[1]).ok_or_else(|| bad("dtype"))?;
                    let shape = if f[2] == "-" {
                        Vec::new()
                    } else {
                        f[2].split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad("shape"))?
                    };
                    let offset = f[3].parse().map_err(|_| bad("offset"))?;
                    let len: usize = f[4].parse().map_err(|_| bad("length"))?;
                    if len != numel(&shape) * dtype.size_of() || shape.contains(&0) {
                        return Err(bad("length for shape"));
                    }
                    if entries.iter().any(|e: &Entry| e.name == name) {
                        return Err(Error::integrity(f[0], "listed twice"));
                    }
                    entries.push(Entry {
                        name,
                        dtype,
                        shape,
                        offset,
                        len,
                        digest: f[5].to_string(),
                    });
                }
                "data" => break rest.parse::<usize>().map_err(|_| manifest("bad data length".into()))?,
                _ => return Err(manifest(format!("unknown header line {line:?}"))),
            }
        };
        let body = &bytes[pos..];
        for e in &entries {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= body.len() && end <= total);
            let Some(end) = end else {
                return Err(Error::integrity(&e.name, "data truncated"));
            };
            let raw = &body[e.offset..end];
            if hex::encode(Sha256::digest(raw)) != e.digest {
                return Err(Error::integrity(&e.name, "checksum mismatch"));
            }
            c.tensors.insert(
                e.name.clone(),
                RawTensor {
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    bytes: raw.to_vec(),
                },
            );
        }
        if body.len() != total {
            return Err(manifest(format!("data section is {} bytes, header says {total}", body.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a half-written file behind
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 over a sequence of named tensors, in order.
pub fn digest_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a RawTensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(t.dtype.name().as_bytes());
        for d in &t.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(&t.bytes);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set_meta("step", 12);
        c.set_meta("note", "two words");
        c.insert("a.weight", &Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32 * 0.5));
        c.insert("b", &Tensor::<f64>::scalar(-1.25));
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get::<f64>("b").unwrap().item(), -1.25);
        assert_eq!(back.meta("note"), Some("two words"));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = sample().to_bytes().unwrap();
        match Container::from_bytes(&bytes[..bytes.len() - 1]) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 1;
        match Container::from_bytes(&bytes) {
            Err(Error::Integrity { tensor, detail }) => {
                assert_eq!(tensor, "a.weight");
                assert!(detail.contains("checksum"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let c = sample();
        assert!(c.get::<f64>("a.weight").is_err());
    }
}
