//! The IDX tensor container used by digit corpora.
//!
//! An IDX stream is a 4-byte big-endian magic, one big-endian u32 per
//! dimension, then the row-major payload. Only the two layouts a digit
//! corpus needs are accepted here: u8 label vectors (magic `0x00000801`)
//! and u8 image stacks (magic `0x00000803`).

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Magic for a one-dimensional u8 tensor (labels).
pub const MAGIC_LABELS: u32 = 0x0000_0801;
/// Magic for a three-dimensional u8 tensor (images).
pub const MAGIC_IMAGES: u32 = 0x0000_0803;

/// A dense u8 tensor parsed from or destined for an IDX stream.
///
/// Invariant: `dims` is length 1 or 3 and `data.len()` equals the product
/// of the dimensions. Constructors and the parser enforce this, so every
/// `IdxTensor` in hand is structurally sound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl IdxTensor {
    /// Wrap a label vector.
    pub fn labels(data: Vec<u8>) -> IdxTensor {
        IdxTensor {
            dims: vec![data.len()],
            data,
        }
    }

    /// Wrap an image stack of `n` images, each `rows` by `cols`.
    pub fn images(n: usize, rows: usize, cols: usize, data: Vec<u8>) -> Result<IdxTensor> {
        if data.len() != n * rows * cols {
            return Err(Error::Format(format!(
                "image payload is {} bytes, want {}x{}x{} = {}",
                data.len(),
                n,
                rows,
                cols,
                n * rows * cols
            )));
        }
        Ok(IdxTensor {
            dims: vec![n, rows, cols],
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of items along the leading dimension.
    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.dims[0] == 0
    }

    /// Row-major bytes of image `i`. Panics if the tensor is not an image
    /// stack or `i` is out of range; callers index within `len()`.
    pub fn image(&self, i: usize) -> &[u8] {
        assert_eq!(self.dims.len(), 3, "not an image stack");
        let px = self.dims[1] * self.dims[2];
        &self.data[i * px..(i + 1) * px]
    }

    /// Serialize to IDX bytes. The inverse of [`parse_idx`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.dims.len() == 1 {
            MAGIC_LABELS
        } else {
            MAGIC_IMAGES
        };
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&magic.to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let chunk: [u8; 4] = bytes
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Format(format!("truncated IDX header at byte {at}")))?;
    Ok(u32::from_be_bytes(chunk))
}

/// Parse an IDX stream, validating the magic and the payload length.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = read_u32(bytes, 0)?;
    let ndim = match magic {
        MAGIC_LABELS => 1,
        MAGIC_IMAGES => 3,
        other => {
            return Err(Error::Format(format!(
                "unsupported IDX magic {other:#010x}, want {MAGIC_LABELS:#010x} or {MAGIC_IMAGES:#010x}"
            )))
        }
    };
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() != want {
        return Err(Error::Format(format!(
            "IDX payload is {} bytes, dimensions {:?} need {}",
            payload.len(),
            dims,
            want
        )));
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

/// Read and parse an IDX file.
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write a tensor as an IDX file.
pub fn write_idx_file(path: &Path, tensor: &IdxTensor) -> Result<()> {
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_an_image_stack_through_bytes() {
        let data: Vec<u8> = (0..2 * 3 * 4).map(|v| v as u8).collect();
        let t = IdxTensor::images(2, 3, 4, data).unwrap();
        let bytes = t.to_bytes();
        // Hand-assembled header: magic, then 2, 3, 4 as big-endian u32.
        assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4]);
        let back = parse_idx(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.image(1)[0], 12);
    }

    #[test]
    fn round_trips_labels_through_bytes() {
        let t = IdxTensor::labels(vec![7, 0, 255]);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
        assert_eq!(parse_idx(&bytes).unwrap(), t);
    }

    #[test]
    fn round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("digits.idx");
        let t = IdxTensor::images(1, 2, 2, vec![9, 8, 7, 6]).unwrap();
        write_idx_file(&path, &t).unwrap();
        assert_eq!(read_idx_file(&path).unwrap(), t);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format(_))));
        let bad_magic = [0u8, 0, 8, 2, 0, 0, 0, 1];
        assert!(matches!(parse_idx(&bad_magic), Err(Error::Format(_))));
        // Header says 5 labels but only 3 bytes follow.
        let short = [0u8, 0, 8, 1, 0, 0, 0, 5, 1, 2, 3];
        assert!(matches!(parse_idx(&short), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_mismatched_image_payload() {
        assert!(IdxTensor::images(2, 2, 2, vec![0; 7]).is_err());
    }
}
