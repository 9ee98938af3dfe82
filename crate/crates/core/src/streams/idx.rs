//! IDX binary tensors (the MNIST distribution format).
//!
//! Layout: two zero bytes, an element-type byte, a dimension-count byte,
//! one big-endian `u32` per dimension, then the row-major payload. Only
//! unsigned-byte payloads (`0x08`) are supported.

use std::path::Path;

use crate::error::{Error, Result};

pub const UNSIGNED_BYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub element_type: u8,
    pub dims: Vec<usize>,
    /// Raw payload bytes, row-major.
    pub data: Vec<u8>,
}

impl IdxTensor {
    /// Payload scaled to `[0, 1]`.
    pub fn to_unit_interval(&self) -> Vec<f64> {
        self.data.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("header needs 4 bytes, file has {}", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {:02x} {:02x}, expected 00 00", bytes[0], bytes[1]),
        });
    }
    let element_type = bytes[2];
    if element_type != UNSIGNED_BYTE {
        return Err(Error::Parse {
            offset: 2,
            message: format!("unsupported element type 0x{element_type:02x}"),
        });
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("{ndim} dimensions need a {header}-byte header, file has {}", bytes.len()),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: expected {expected} bytes, found {actual}"),
        });
    }
    if actual > expected {
        return Err(Error::Parse {
            offset: header + expected,
            message: format!("{} trailing bytes after payload", actual - expected),
        });
    }
    Ok(IdxTensor {
        element_type,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Encodes an unsigned-byte tensor.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != data.len() || dims.len() > u8::MAX as usize {
        return Err(Error::Invariant(format!(
            "payload of {} bytes does not fill dims {dims:?}",
            data.len()
        )));
    }
    let mut out = vec![0, 0, UNSIGNED_BYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Invariant(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_three_dim_fixture() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4, 5, 6, 7, 255];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 2, 2]);
        assert_eq!(t.data, vec![1, 2, 3, 4, 5, 6, 7, 255]);
        assert_eq!(t.to_unit_interval()[7], 1.0);
    }

    #[test]
    fn decodes_label_vector() {
        let t = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![1, 2, 3]);
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("found 2"), "{msg}");
    }

    #[test]
    fn rejects_bad_magic_and_type() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]), Err(Error::Parse { offset: 2, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0]), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let bytes = encode_idx(&dims, &data).unwrap();
            let t = parse_idx(&bytes).unwrap();
            prop_assert_eq!(t.dims, dims);
            prop_assert_eq!(t.data, data);
        }
    }
}
