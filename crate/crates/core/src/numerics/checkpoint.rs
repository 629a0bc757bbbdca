//! Tensor container files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "DIFFAUGC"
//! version      u32
//! manifest_len u64
//! manifest     JSON, manifest_len bytes
//! data         concatenated f64 buffers
//! ```
//!
//! The manifest lists `{name, shape, offset, len}` per tensor, where `offset`
//! is the byte offset of the buffer from the start of the data section and
//! `len` its element count.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DIFFAUGC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = entries
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        format_version: FORMAT_VERSION,
        tensors,
    })
    .expect("manifest serializes");

    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes
        .get(20..20 + mlen)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(bad("manifest version disagrees with header"));
    }
    let data = &bytes[20 + mlen..];
    manifest
        .tensors
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let end = start + 8 * e.len as usize;
            let raw = data.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!("buffer for `{}` runs past end of file", e.name))
            })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, values)
                .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
            Ok((e.name, t))
        })
        .collect()
}

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display()))
}

/// Named tensors of `params`, each name prefixed with `prefix.`.
pub fn prefixed<'a, P: Parameters + ?Sized>(prefix: &str, params: &'a P) -> Vec<(String, &'a Tensor)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Copies tensors named `prefix.<name>` into `params`, checking shapes.
pub fn load_into<P: Parameters + ?Sized>(
    params: &mut P,
    prefix: &str,
    entries: &[(String, Tensor)],
) -> Result<()> {
    let names: Vec<String> = params
        .named_tensors()
        .into_iter()
        .map(|(n, _)| format!("{prefix}.{n}"))
        .collect();
    for (name, dst) in names.iter().zip(params.tensors_mut()) {
        let (_, src) = entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Dimension(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(-1e300f64..1e300, 1..40),
            extra in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..5),
        ) {
            let a = Tensor::vector(values).unwrap();
            let b = Tensor::vector(extra).unwrap();
            let bytes = encode(&[("a".into(), &a), ("nested.b".into(), &b)]);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), 2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&a));
            prop_assert_eq!(bits(&back[1].1), bits(&b));
            prop_assert_eq!(&back[1].0, "nested.b");
        }
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let bytes = encode(&[("t".into(), &t)]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(decode(&ver).is_err());
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let a = Tensor::zeros(&[3]);
        let b = Tensor::zeros(&[2, 2]);
        let bytes = encode(&[("a".into(), &a), ("b".into(), &b)]);
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let m: Manifest = serde_json::from_slice(&bytes[20..20 + mlen]).unwrap();
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(bytes.len(), 20 + mlen + 8 * 7);
    }
}
