//! 8-bit PNG images: RGB for inputs and overlays, indexed or grayscale for
//! label maps.

use std::io::Cursor;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{CrfError, Result};

fn png_err(e: impl std::fmt::Display) -> CrfError {
    CrfError::Format(format!("PNG: {e}"))
}

fn decode_raw(bytes: &[u8]) -> Result<(usize, usize, ColorType, Vec<u8>)> {
    let mut decoder = Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != BitDepth::Eight {
        return Err(png_err(format!(
            "only 8-bit images are supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    // drop any row padding
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w * channels]);
    }
    Ok((w, h, info.color_type, data))
}

/// Decodes an 8-bit RGB PNG into `(width, height, rgb bytes)`.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match decode_raw(bytes)? {
        (w, h, ColorType::Rgb, data) => Ok((w, h, data)),
        (_, _, other, _) => Err(png_err(format!("expected an RGB image, found {other:?}"))),
    }
}

/// Decodes an indexed or grayscale 8-bit PNG into raw label values.
pub fn decode_png_labels(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    match decode_raw(bytes)? {
        (w, h, ColorType::Indexed | ColorType::Grayscale, data) => Ok((w, h, data)),
        (_, _, other, _) => Err(png_err(format!(
            "expected an indexed or grayscale label map, found {other:?}"
        ))),
    }
}

fn encode(
    w: usize,
    h: usize,
    color: ColorType,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

pub fn encode_png_rgb(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(w, h, ColorType::Rgb, None, rgb)
}

/// Indexed PNG with a 256-entry RGB palette.
pub fn encode_png_indexed(w: usize, h: usize, indices: &[u8], palette: &[u8]) -> Result<Vec<u8>> {
    encode(w, h, ColorType::Indexed, Some(palette), indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let rgb: Vec<u8> = (0..30).collect();
        let png = encode_png_rgb(5, 2, &rgb).unwrap();
        assert_eq!(decode_png_rgb(&png).unwrap(), (5, 2, rgb));

        let palette: Vec<u8> = (0..=255u8).flat_map(|i| [i, 0, 255 - i]).collect();
        let idx = vec![0, 1, 255, 2, 3, 4];
        let png = encode_png_indexed(3, 2, &idx, &palette).unwrap();
        assert_eq!(decode_png_labels(&png).unwrap(), (3, 2, idx));
        assert!(decode_png_rgb(&png).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_png_rgb(b"\x89PNG\r\n\x1a\nnope").is_err());
    }
}
