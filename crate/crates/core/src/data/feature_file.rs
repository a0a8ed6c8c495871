use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"BCAF";
pub const FEATURE_VERSION: u32 = 1;
/// magic (4) + version (4) + modality (1) + count (4) + dim (4)
pub const FEATURE_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio = 0,
    Text = 1,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    fn from_tag(tag: u8) -> Result<Self, FormatError> {
        match tag {
            0 => Ok(Modality::Audio),
            1 => Ok(Modality::Text),
            t => Err(FormatError::BadModality(t)),
        }
    }
}

/// Write an `[N×d]` matrix of utterance features.
pub fn write_feature_file(path: impl AsRef<Path>, modality: Modality, matrix: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if matrix.rank() != 2 || matrix.shape()[0] == 0 || matrix.shape()[1] == 0 {
        return Err(Error::Validation(format!(
            "feature matrix must be non-empty [N x d], got {:?}",
            matrix.shape()
        )));
    }
    let (count, dim) = (matrix.shape()[0], matrix.shape()[1]);
    let (Ok(c32), Ok(d32)) = (u32::try_from(count), u32::try_from(dim)) else {
        return Err(Error::Validation(format!("feature matrix {count}x{dim} exceeds u32 header fields")));
    };
    if c32.checked_mul(d32).is_none() {
        return Err(Error::Validation(format!("feature matrix {count}x{dim} exceeds u32 header fields")));
    }
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + matrix.numel() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.push(modality as u8);
    buf.extend_from_slice(&c32.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<(Modality, Tensor<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

fn parse(bytes: &[u8]) -> Result<(Modality, Tensor<f32>), FormatError> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: FEATURE_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let modality = Modality::from_tag(bytes[8])?;
    let (count, dim) = (u32_at(9), u32_at(13));
    // The element count itself must be representable in the u32 header domain.
    let elements = count.checked_mul(dim).ok_or(FormatError::Overflow)?;
    let payload = elements as u64 * 4;
    if usize::try_from(payload).is_err() {
        return Err(FormatError::Overflow);
    }
    let expected = FEATURE_HEADER_LEN as u64 + payload;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes(actual - expected));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::new(vec![count as usize, dim as usize], data).map_err(|e| FormatError::Record(e.to_string()))?;
    Ok((modality, t))
}
