use std::io::Read;

use flate2::read::GzDecoder;
use thiserror::Error;

/// Magic number of an unsigned-byte IDX file with three dimensions (images).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic number of an unsigned-byte IDX file with one dimension (labels).
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Upper bound on decoded payload size; MNIST train images are ~47 MB.
pub const MAX_DECODED_BYTES: usize = 1 << 28;

const GZIP_PREFIX: [u8; 2] = [0x1f, 0x8b];
const UBYTE: u8 = 0x08;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdxError {
    #[error("file too short for an IDX header ({0} bytes)")]
    TooShort(usize),
    #[error("bad magic number {0} (0x{0:08x})")]
    BadMagic(u32),
    #[error("unsupported element type 0x{0:02x}; only unsigned bytes are handled")]
    UnsupportedType(u8),
    #[error("payload holds {got} bytes but the header declares {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} bytes after the declared payload")]
    TrailingBytes(usize),
    #[error("declared payload exceeds {MAX_DECODED_BYTES} bytes")]
    TooLarge,
    #[error("gzip: {0}")]
    Gzip(String),
}

/// Raw unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .take(MAX_DECODED_BYTES as u64 + 1024)
        .read_to_end(&mut out)
        .map_err(|e| IdxError::Gzip(e.to_string()))?;
    if out.len() > MAX_DECODED_BYTES {
        return Err(IdxError::TooLarge);
    }
    Ok(out)
}

/// Decodes an IDX byte stream, inflating it first when it starts with the
/// gzip signature.
pub fn decode_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    if bytes.starts_with(&GZIP_PREFIX) {
        return decode_plain(&gunzip(bytes)?);
    }
    decode_plain(bytes)
}

fn decode_plain(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TooShort(bytes.len()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[3] == 0 {
        return Err(IdxError::BadMagic(magic));
    }
    match bytes[2] {
        UBYTE => {}
        0x09 | 0x0b | 0x0c | 0x0d | 0x0e => return Err(IdxError::UnsupportedType(bytes[2])),
        _ => return Err(IdxError::BadMagic(magic)),
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::TooShort(bytes.len()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_DECODED_BYTES)
        .ok_or(IdxError::TooLarge)?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(IdxError::TrailingBytes(payload.len() - expected));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Uncompressed IDX encoding; inverse of [`decode_idx`] on plain input.
pub fn encode_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn sample() -> IdxArray {
        IdxArray {
            dims: vec![2, 2, 3],
            data: (0..12).collect(),
        }
    }

    #[test]
    fn round_trip_and_magic() {
        let bytes = encode_idx(&sample());
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(decode_idx(&bytes).unwrap(), sample());
        assert_eq!(encode_idx(&decode_idx(&bytes).unwrap()), bytes);
    }

    #[test]
    fn gzip_input() {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&encode_idx(&sample())).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(decode_idx(&gz).unwrap(), sample());
        assert!(matches!(
            decode_idx(&gz[..gz.len() / 2]),
            Err(IdxError::Gzip(_))
        ));
    }

    #[test]
    fn error_paths() {
        let mut bytes = encode_idx(&sample());
        assert_eq!(decode_idx(&bytes[..3]), Err(IdxError::TooShort(3)));
        assert_eq!(
            decode_idx(&bytes[..bytes.len() - 1]),
            Err(IdxError::Truncated {
                expected: 12,
                got: 11
            })
        );
        bytes.push(0);
        assert_eq!(decode_idx(&bytes), Err(IdxError::TrailingBytes(1)));
        assert_eq!(
            decode_idx(&9999u32.to_be_bytes()),
            Err(IdxError::BadMagic(9999))
        );
        assert_eq!(
            decode_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]),
            Err(IdxError::UnsupportedType(0x0d))
        );
        let huge = [0, 0, 8, 2, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff];
        assert_eq!(decode_idx(&huge), Err(IdxError::TooLarge));
    }
}
