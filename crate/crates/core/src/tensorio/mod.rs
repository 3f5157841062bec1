//! On-disk codec for tensors, dataset manifests and prediction files.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MGC1"
//! 4       1           dtype code (0x01 = f32, the only one)
//! 5       1           ndim (>= 1)
//! 6       4 * ndim    dims, u32 each
//! ..      4 * numel   row-major f32 payload
//! ```

mod manifest;
mod predictions;

pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Split};
pub use predictions::{read_predictions, write_predictions, PredictionFile};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorBlob;

pub const MAGIC: [u8; 4] = *b"MGC1";
pub const DTYPE_F32: u8 = 0x01;

/// Serializes a tensor into the `MGC1` byte layout.
pub fn encode_tensor(t: &TensorBlob) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::validation("tensor contains NaN or infinite values"));
    }
    let ndim = t.shape().len();
    let ndim = u8::try_from(ndim)
        .map_err(|_| Error::validation(format!("ndim {ndim} does not fit in a u8")))?;
    let mut out = Vec::with_capacity(6 + 4 * usize::from(ndim) + 4 * t.data().len());
    out.extend_from_slice(&MAGIC);
    out.push(DTYPE_F32);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::validation(format!("dimension {d} does not fit in a u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses the `MGC1` byte layout. `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<TensorBlob> {
    let truncated = |needed: usize| Error::Truncated {
        path: path.to_path_buf(),
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < 6 {
        return Err(truncated(6));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::UnknownDtype {
            path: path.to_path_buf(),
            code: bytes[4],
        });
    }
    let ndim = usize::from(bytes[5]);
    if ndim == 0 {
        return Err(Error::validation(format!("{}: ndim is 0", path.display())));
    }
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::validation(format!(
            "{}: zero-sized dimension in {shape:?}",
            path.display()
        )));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::validation(format!("{}: shape overflows", path.display())))?;
    let total = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::validation(format!("{}: shape overflows", path.display())))?;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(Error::validation(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - total
        )));
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = TensorBlob::new(shape, data)?;
    if !t.is_finite() {
        return Err(Error::validation(format!(
            "{}: payload contains NaN or infinite values",
            path.display()
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorBlob) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlob> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
