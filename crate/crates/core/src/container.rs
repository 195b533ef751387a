//! Binary tensor container for scores, samples and labels.
//!
//! Layout:
//!
//! | bytes    | content                                              |
//! |----------|------------------------------------------------------|
//! | 8        | magic `HFTENSOR`                                     |
//! | 4        | header length `L`, u32 little-endian                 |
//! | `L`      | JSON header `{"dtype", "shape", "endianness"}`       |
//! | rest     | row-major values, little-endian, `dtype`-sized each  |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::NdArray;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HFTENSOR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub endianness: String,
}

pub fn encode(array: &NdArray, dtype: Dtype) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        dtype,
        shape: array.shape().to_vec(),
        endianness: "little".into(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + array.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &x in array.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            Dtype::I64 => {
                if x.fract() != 0.0 || !x.is_finite() {
                    return Err(Error::Format(format!("{x} is not an integer")));
                }
                out.extend_from_slice(&(x as i64).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Splits framing shared with the checkpoint format: magic, header bytes,
/// payload.
pub(crate) fn split_frame<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rest = &bytes[12..];
    if rest.len() < len {
        return Err(Error::Format("header runs past end of file".into()));
    }
    Ok(rest.split_at(len))
}

pub fn decode(bytes: &[u8]) -> Result<(Header, NdArray)> {
    let (header, payload) = split_frame(bytes, MAGIC)?;
    let header: Header = serde_json::from_slice(header)?;
    if header.endianness != "little" {
        return Err(Error::Format(format!("unsupported endianness {:?}", header.endianness)));
    }
    let n: usize = header.shape.iter().product();
    let w = header.dtype.width();
    if payload.len() != n * w {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            n * w
        )));
    }
    let data = payload
        .chunks_exact(w)
        .map(|c| match header.dtype {
            Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
            Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            Dtype::I64 => i64::from_le_bytes(c.try_into().unwrap()) as f64,
        })
        .collect();
    let array = NdArray::new(&header.shape, data)?;
    Ok((header, array))
}

pub fn write(path: impl AsRef<Path>, array: &NdArray, dtype: Dtype) -> Result<()> {
    Ok(std::fs::write(path, encode(array, dtype)?)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<NdArray> {
    Ok(decode(&std::fs::read(path)?)?.1)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let a = NdArray::new(&[labels.len()], labels.iter().map(|&l| l as f64).collect())?;
    write(path, &a, Dtype::I64)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let a = read(path)?;
    if a.ndim() != 1 || a.data().iter().any(|&x| x < 0.0) {
        return Err(Error::Format("labels must be a non-negative vector".into()));
    }
    Ok(a.data().iter().map(|&x| x as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let a = NdArray::new(&[2, 3], vec![0.1, -2.5, 1e-300, f64::MAX, -0.0, 3.0]).unwrap();
        let (h, b) = decode(&encode(&a, Dtype::F64).unwrap()).unwrap();
        assert_eq!(h.shape, vec![2, 3]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn f32_payload_rounds_once() {
        let a = NdArray::new(&[3], vec![0.1, 1.0 / 3.0, 7.0]).unwrap();
        let bytes = encode(&a, Dtype::F32).unwrap();
        let (_, b) = decode(&bytes).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
        let again = encode(&b, Dtype::F32).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn layout_is_documented_framing() {
        let a = NdArray::new(&[1], vec![1.0]).unwrap();
        let bytes = encode(&a, Dtype::F64).unwrap();
        assert_eq!(&bytes[..8], b"HFTENSOR");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert_eq!(header, r#"{"dtype":"f64","shape":[1],"endianness":"little"}"#);
        assert_eq!(&bytes[12 + len..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        let a = NdArray::new(&[2], vec![1.0, 2.0]).unwrap();
        let good = encode(&a, Dtype::F64).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(encode(&NdArray::new(&[1], vec![0.5]).unwrap(), Dtype::I64).is_err());
    }

    #[test]
    fn labels_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.bin");
        write_labels(&p, &[3, 0, 2]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![3, 0, 2]);
    }
}
