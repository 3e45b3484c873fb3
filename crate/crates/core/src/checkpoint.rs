//! Checkpoint archives: 8-byte magic `CCLCKPT1`, a `key=value` metadata
//! block, then named arrays in the dense array format.
//!
//! Layout (little-endian): magic, `u32` metadata length, metadata bytes,
//! `u32` array count, then per array `u16` name length, name, `u32` blob
//! length, blob.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;

use crate::arrayfile;
use crate::autograd::{Params, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CCLCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    arrays: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets (or replaces) a metadata entry. Keys and values are single-line.
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n') && !value.contains('\n'));
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .meta(key)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks metadata `{key}`")))?;
        v.parse()
            .map_err(|_| Error::Invalid(format!("checkpoint metadata `{key}` is not an integer: {v}")))
    }

    /// Metadata entries under `prefix.`, with the prefix stripped.
    pub fn meta_section(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{prefix}.");
        self.meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    /// Stores a tensor; values are narrowed to f32.
    pub fn push_array(&mut self, name: impl Into<String>, value: &Tensor) {
        self.arrays.push((name.into(), value.mapv(|v| v as f32)));
    }

    pub fn array(&self, name: &str) -> Result<Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.mapv(|v| v as f64))
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks array `{name}`")))
    }

    pub fn push_params(&mut self, prefix: &str, params: &Params) {
        for (name, value) in params.iter() {
            self.push_array(format!("{prefix}.{name}"), value);
        }
    }

    /// Fills a parameter set shaped like `template` from arrays under
    /// `prefix`; any missing name or differing shape is an architecture error.
    pub fn params(&self, prefix: &str, template: &Params) -> Result<Params> {
        let mut out = Params::new();
        for (name, want) in template.iter() {
            let full = format!("{prefix}.{name}");
            let found = self.array(&full).map_err(|_| Error::Architecture {
                field: full.clone(),
                checkpoint: "<absent>".into(),
                config: format!("{:?}", want.shape()),
            })?;
            if found.shape() != want.shape() {
                return Err(Error::Architecture {
                    field: full,
                    checkpoint: format!("{:?}", found.shape()),
                    config: format!("{:?}", want.shape()),
                });
            }
            out.push(name, found);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, array) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let blob = arrayfile::encode(array);
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let malformed = |msg: &str| Error::Malformed {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
            });
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| malformed("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
        let meta_len = u32_at(take(4)?);
        let meta_text = std::str::from_utf8(take(meta_len)?).map_err(|_| malformed("metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed("metadata line without `=`"))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = u32_at(take(4)?);
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = take(2)?;
            let name_len = u16::from_le_bytes([nl[0], nl[1]]) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| malformed("array name is not UTF-8"))?
                .to_string();
            let blob_len = u32_at(take(4)?);
            let array = arrayfile::decode(take(blob_len)?, origin)?;
            arrays.push((name, array));
        }
        if pos != bytes.len() {
            return Err(malformed("trailing bytes after the last array"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn round_trip_and_errors() {
        let mut p = Params::new();
        p.push("a.w", Tensor::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64 * 0.25));
        p.push("a.b", Tensor::zeros(IxDyn(&[3])));
        let mut c = Checkpoint::new();
        c.set_meta("kind", "pretrain");
        c.set_meta("step", 7);
        c.set_meta("step", 8);
        c.push_params("enc", &p);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_usize("step").unwrap(), 8);
        assert_eq!(back.params("enc", &p).unwrap(), p);

        let mut wrong = Params::new();
        wrong.push("a.w", Tensor::zeros(IxDyn(&[3, 3])));
        match back.params("enc", &wrong) {
            Err(Error::Architecture { field, .. }) => assert_eq!(field, "enc.a.w"),
            other => panic!("{other:?}"),
        }
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(Error::BadMagic { .. })));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
