//! IDX (MNIST) image and label streams.

use crate::error::{Error, Result};
use crate::model::IMAGE_SIDE;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Length {
                needed: n,
                available,
                context: format!("{} stream at byte {}", self.what, self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn expect_magic(c: &mut Cursor, magic: u32) -> Result<()> {
    let got = c.u32()?;
    if got != magic {
        return Err(Error::Format(format!(
            "IDX {} magic is 0x{got:08x}, expected 0x{magic:08x}",
            c.what
        )));
    }
    Ok(())
}

/// Parses an IDX image stream and its label stream. Pixels are scaled to
/// `[0, 1]` by dividing by 255.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Vec<(Vec<f64>, u8)>> {
    let mut img = Cursor {
        bytes: image_bytes,
        pos: 0,
        what: "image",
    };
    expect_magic(&mut img, IMAGE_MAGIC)?;
    let n_images = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Format(format!(
            "IDX images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }

    let mut lab = Cursor {
        bytes: label_bytes,
        pos: 0,
        what: "label",
    };
    expect_magic(&mut lab, LABEL_MAGIC)?;
    let n_labels = lab.u32()? as usize;
    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "IDX image count {n_images} does not match label count {n_labels}"
        )));
    }

    let pixels = img.take(n_images * PIXELS)?;
    let labels = lab.take(n_labels)?;
    Ok(pixels
        .chunks_exact(PIXELS)
        .zip(labels)
        .map(|(p, &l)| (p.iter().map(|&b| b as f64 / 255.0).collect(), l))
        .collect())
}

/// Encodes images (values rounded from `[0, 1]` to bytes) and labels as an
/// IDX image stream and label stream.
pub fn write_idx(items: &[(Vec<f64>, u8)]) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + items.len() * PIXELS);
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(items.len() as u32).to_be_bytes());
    images.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    images.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + items.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for (px, label) in items {
        images.extend(px.iter().map(|&v| pixel_byte(v)));
        labels.push(*label);
    }
    (images, labels)
}

pub(crate) fn pixel_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_two_zero_images() {
        let mut images = header(IMAGE_MAGIC, &[2, 28, 28]);
        assert_eq!(&images[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 0x1c, 0, 0, 0, 0x1c]);
        images.extend(vec![0u8; 2 * 784]);
        let mut labels = header(LABEL_MAGIC, &[2]);
        labels.extend([2, 8]);
        let parsed = parse_idx(&images, &labels).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(parsed.iter().all(|(p, _)| p.len() == 784 && p.iter().all(|&v| v == 0.0)));
        assert_eq!(parsed[1].1, 8);
    }

    #[test]
    fn writer_round_trips_three_images() {
        let items: Vec<(Vec<f64>, u8)> = (0..3u8)
            .map(|k| ((0..784).map(|i| ((i * 7 + k as usize) % 256) as f64 / 255.0).collect(), k))
            .collect();
        let (img, lab) = write_idx(&items);
        assert_eq!(parse_idx(&img, &lab).unwrap(), items);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_count_mismatch() {
        let mut images = header(IMAGE_MAGIC, &[1, 28, 28]);
        images.extend(vec![0u8; 784]);
        let mut labels = header(LABEL_MAGIC, &[1]);
        labels.push(2);

        let mut bad = images.clone();
        bad[3] = 0x04;
        match parse_idx(&bad, &labels).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("0x00000804"), "{msg}"),
            e => panic!("{e}"),
        }
        assert!(matches!(
            parse_idx(&images[..images.len() - 1], &labels),
            Err(Error::Length { .. })
        ));
        let two = header(LABEL_MAGIC, &[2]);
        assert!(matches!(parse_idx(&images, &two), Err(Error::Consistency(_))));
        let small = header(IMAGE_MAGIC, &[1, 27, 28]);
        assert!(matches!(parse_idx(&small, &labels), Err(Error::Format(_))));
    }
}
