//! Binary PGM (P5) output.

use crate::error::{Error, Result};

fn header(width: usize, height: usize, maxval: u8) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

/// 8-bit grayscale, `round(255 · clamp(v, 0, 1))` per pixel.
pub fn encode_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::dim("encode_pgm", "pixels", height * width, values.len()));
    }
    let mut out = header(width, height, 255);
    out.extend(values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// Binary mask with maxval 1: one byte per pixel holding 0 or 1.
pub fn encode_mask_pgm(mask: &[bool], height: usize, width: usize) -> Result<Vec<u8>> {
    if mask.len() != height * width {
        return Err(Error::dim("encode_mask_pgm", "pixels", height * width, mask.len()));
    }
    let mut out = header(width, height, 1);
    out.extend(mask.iter().map(|&m| m as u8));
    Ok(out)
}

/// Parses a P5 file into `(width, height, maxval, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, u16, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PGM header ends early".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("PGM field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h || maxval > 255 {
        return Err(Error::Format(format!(
            "PGM payload is {} bytes for {w}x{h} at maxval {maxval}",
            data.len()
        )));
    }
    Ok((w, h, maxval as u16, data.to_vec()))
}
