//! Binary tensor fixtures.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"VTNS"
//! u8     version (1)
//! u8     dtype   (0 = f32, 1 = f64)
//! u8     rank
//! u64    dims[rank]
//! ...    row-major values
//! ```

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};

use super::error::{AdapterError, Result};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"VTNS";
const VERSION: u8 = 1;

pub fn write_tensor<S: Scalar, W: Write>(mut out: W, array: &ArrayD<S>) -> Result<()> {
    let rank = u8::try_from(array.ndim()).map_err(|_| AdapterError::Fixture("rank exceeds 255".into()))?;
    let mut buf = Vec::with_capacity(7 + 8 * array.ndim() + array.len() * S::DTYPE.width());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, S::DTYPE.code(), rank]);
    for &d in array.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in array.iter() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<S: Scalar, R: Read>(mut input: R) -> Result<ArrayD<S>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(AdapterError::Fixture("missing VTNS header".into()));
    }
    if bytes[4] != VERSION {
        return Err(AdapterError::Fixture(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| AdapterError::Fixture("unknown dtype".into()))?;
    if dtype != S::DTYPE {
        return Err(AdapterError::Fixture(format!("fixture holds {dtype:?}, expected {:?}", S::DTYPE)));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 8 * rank;
    if bytes.len() < header {
        return Err(AdapterError::Fixture("truncated shape header".into()));
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = dtype.width();
    if bytes.len() != header + count * width {
        return Err(AdapterError::Fixture(format!(
            "expected {} value bytes, found {}",
            count * width,
            bytes.len() - header
        )));
    }
    let values = bytes[header..].chunks_exact(width).map(S::read_le).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| AdapterError::Fixture(e.to_string()))
}
