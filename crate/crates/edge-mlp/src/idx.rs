//! IDX binary container parsing.
//!
//! Layout: a big-endian 32-bit magic (two zero bytes, a dtype byte, a rank
//! byte), `rank` big-endian 32-bit dimension sizes, then the payload in
//! row-major order. Only dtype 0x08 (unsigned byte) is supported, which is
//! what the MNIST-family distributions use.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

const DTYPE_U8: u8 = 0x08;
const MAX_RANK: u8 = 4;

/// A parsed IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

/// Parse an in-memory IDX byte stream, consuming exactly the whole buffer.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: 4,
            available: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let dtype = bytes[2];
    let rank = bytes[3];
    if bytes[0] != 0 || bytes[1] != 0 || dtype != DTYPE_U8 || rank == 0 || rank > MAX_RANK {
        return Err(Error::UnknownMagic(magic));
    }

    let header_len = 4 + 4 * rank as usize;
    if bytes.len() < header_len {
        return Err(Error::TruncatedPayload {
            expected: header_len,
            available: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut total: usize = 1;
    for d in 0..rank as usize {
        let off = 4 + 4 * d;
        let dim = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
            as usize;
        dims.push(dim);
        total = total
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidDataset("dimension product overflows".into()))?;
    }

    let expected = header_len + total;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            available: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }

    Ok(IdxTensor {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Read and parse an IDX file, transparently gunzipping when the filename
/// carries a gzip suffix (`.gz` or `.gzip`).
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = fs::read(path)?;
    let is_gzip = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("gz") || e.eq_ignore_ascii_case("gzip"))
        .unwrap_or(false);
    let bytes = if is_gzip {
        let mut decoder = flate2::read::GzDecoder::new(raw.as_slice());
        let mut out = Vec::new();
        decoder.read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Serialize an [`IdxTensor`] back to IDX bytes (used by tests and tooling).
pub fn write_idx(tensor: &IdxTensor) -> Vec<u8> {
    let rank = tensor.dims.len() as u8;
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&[0, 0, DTYPE_U8, rank]);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dtype: u8, dims: &[u32]) -> Vec<u8> {
        let mut v = vec![0, 0, dtype, dims.len() as u8];
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_label_vector() {
        let mut bytes = header(0x08, &[2]);
        bytes.extend_from_slice(&[3, 7]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2]);
        assert_eq!(t.data, vec![3, 7]);
    }

    #[test]
    fn parses_single_zero_image() {
        let mut bytes = header(0x08, &[1, 28, 28]);
        bytes.extend_from_slice(&[0u8; 784]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![1, 28, 28]);
        assert!(t.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = header(0x08, &[10]);
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        assert!(matches!(
            parse_idx(&bytes),
            Err(Error::TruncatedPayload {
                expected: 18,
                available: 13
            })
        ));
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut bytes = header(0x08, &[2]);
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            parse_idx(&bytes),
            Err(Error::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn unknown_magic_detected() {
        // wrong dtype
        let mut bytes = header(0x09, &[1]);
        bytes.push(0);
        assert!(matches!(parse_idx(&bytes), Err(Error::UnknownMagic(_))));
        // nonzero reserved prefix
        let bad = [1u8, 0, 0x08, 1, 0, 0, 0, 0];
        assert!(matches!(parse_idx(&bad), Err(Error::UnknownMagic(_))));
    }

    #[test]
    fn roundtrip_including_gzip() {
        use std::io::Write;

        let tensor = IdxTensor {
            dims: vec![2, 3],
            data: vec![9, 8, 7, 6, 5, 4],
        };
        let bytes = write_idx(&tensor);
        assert_eq!(parse_idx(&bytes).unwrap(), tensor);

        let dir = std::env::temp_dir().join("edge_mlp_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let gz_path = dir.join("t.idx.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&bytes).unwrap();
        std::fs::write(&gz_path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx_file(&gz_path).unwrap(), tensor);
        std::fs::remove_dir_all(&dir).ok();
    }
}
