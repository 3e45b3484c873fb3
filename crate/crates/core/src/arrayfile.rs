//! Dense array files: 8-byte magic `CCLARR01`, then little-endian
//! `u8` rank, `rank x u32` dims and row-major `f32` payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CCLARR01";

pub fn encode(array: &ArrayD<f32>) -> Vec<u8> {
    let shape = array.shape();
    let mut out = Vec::with_capacity(9 + 4 * shape.len() + 4 * array.len());
    out.extend_from_slice(MAGIC);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one array blob. `origin` is only used for error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<ArrayD<f32>> {
    let malformed = |msg: &str| Error::Malformed {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    let rank = bytes[8] as usize;
    let header = 9 + 4 * rank;
    if bytes.len() < header {
        return Err(malformed("truncated header"));
    }
    let dims: Vec<usize> = bytes[9..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(Error::ShapeMismatch {
            path: origin.to_path_buf(),
            expected: dims,
            found: vec![payload.len() / 4],
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| malformed(&e.to_string()))
}

pub fn write_array(path: &Path, array: &ArrayD<f32>) -> Result<()> {
    fs::write(path, encode(array)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads an array and checks its header against an expected shape.
pub fn read_array_expect(path: &Path, expected: &[usize]) -> Result<ArrayD<f32>> {
    let array = read_array(path)?;
    if array.shape() != expected {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            expected: expected.to_vec(),
            found: array.shape().to_vec(),
        });
    }
    Ok(array)
}
