//! Binary PPM (`P6`) and PGM (`P5`) with 8-bit samples.

use crate::error::{CrfError, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(CrfError::Format("not a PNM file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(CrfError::Format("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| CrfError::Format("PNM header value out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the samples
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(CrfError::Format("malformed PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(CrfError::Format(format!(
            "only 8-bit PNM (maxval 255) is supported, got maxval {maxval}"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        data_start: pos + 1,
    })
}

fn decode(bytes: &[u8], want: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if &h.magic != want {
        return Err(CrfError::Format(format!(
            "expected {} PNM data, found {}",
            String::from_utf8_lossy(want),
            String::from_utf8_lossy(&h.magic)
        )));
    }
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| CrfError::Format("PNM dimensions overflow".into()))?;
    let data = &bytes[h.data_start..];
    if data.len() < n {
        return Err(CrfError::Format(format!(
            "truncated PNM data: {} of {n} bytes",
            data.len()
        )));
    }
    Ok((h.width, h.height, data[..n].to_vec()))
}

/// Decodes a `P6` image into `(width, height, rgb bytes)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P6", 3)
}

/// Decodes a `P5` image into `(width, height, gray bytes)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, b"P5", 1)
}

fn encode(magic: &str, width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    encode("P6", width, height, rgb)
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    encode("P5", width, height, gray)
}
