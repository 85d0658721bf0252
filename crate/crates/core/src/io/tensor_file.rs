//! The `CRFT` tensor container: one or more records, each
//!
//! ```text
//! "CRFT" | version u8 = 1 | dtype u8 = 0 (f32) | ndims u8 | dims u32 LE × ndims | payload f32 LE
//! ```
//!
//! with the payload in row-major order.

use std::io::{Read, Write};

use crate::error::{CrfError, Result};

pub const MAGIC: &[u8; 4] = b"CRFT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// One tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > usize::from(u8::MAX) {
            return Err(CrfError::invalid("too many tensor dimensions"));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(CrfError::invalid("tensor dimension exceeds 32 bits"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(CrfError::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Rounds each value to the nearest `f32`.
    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut header = Vec::with_capacity(7 + 4 * self.dims.len());
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&[VERSION, DTYPE_F32, self.dims.len() as u8]);
        for &d in &self.dims {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        w.write_all(&header)?;
        let payload: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&payload)
    }
}

/// Encodes records back to back.
pub fn encode_records(records: &[TensorRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        r.write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(CrfError::Format(format!(
            "truncated tensor file while reading {what}"
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Decodes every record in `bytes`.
pub fn decode_records(mut bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    let mut records = Vec::new();
    if bytes.is_empty() {
        return Err(CrfError::Format("empty tensor file".into()));
    }
    while !bytes.is_empty() {
        if take(&mut bytes, 4, "magic")? != MAGIC {
            return Err(CrfError::Format("bad tensor file magic".into()));
        }
        let head = take(&mut bytes, 3, "header")?;
        let (version, dtype, ndims) = (head[0], head[1], usize::from(head[2]));
        if version != VERSION {
            return Err(CrfError::Format(format!(
                "unsupported tensor file version {version}"
            )));
        }
        if dtype != DTYPE_F32 {
            return Err(CrfError::Format(format!(
                "unsupported tensor dtype {dtype}"
            )));
        }
        let dims: Vec<usize> = take(&mut bytes, 4 * ndims, "dims")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CrfError::Format(format!("tensor dims {dims:?} overflow")))?;
        let data = take(&mut bytes, n, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { dims, data });
    }
    Ok(records)
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<TensorRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| CrfError::Format(format!("reading tensor data: {e}")))?;
    decode_records(&bytes)
}
