//! Minimal Netpbm graymap codec: reads P5 (binary) and P2 (ASCII) with
//! maxval ≤ 255, writes P5.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Gray8> {
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(fmt("not a Netpbm file"));
    }
    let ascii = match bytes[1] {
        b'5' => false,
        b'2' => true,
        b'1' | b'4' => return Err(fmt("bitmap (PBM) images are not supported; expected 8-bit grayscale")),
        b'3' | b'6' | b'7' => return Err(fmt("image is not grayscale")),
        _ => return Err(fmt("unknown Netpbm magic")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| fmt("bad width"))?;
    let height = h.number().ok_or_else(|| fmt("bad height"))?;
    let maxval = h.number().ok_or_else(|| fmt("bad maxval"))?;
    if width == 0 || height == 0 {
        return Err(fmt("zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fmt("only 8-bit grayscale (maxval 1..=255) is supported"));
    }
    let count = width * height;
    let pixels = if ascii {
        let mut px = Vec::with_capacity(count);
        for _ in 0..count {
            let v = h.number().ok_or_else(|| fmt("truncated pixel data"))?;
            if v > maxval {
                return Err(fmt("pixel value exceeds maxval"));
            }
            px.push(v as u8);
        }
        px
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        let start = h.pos + 1;
        let raster = bytes
            .get(start..start + count)
            .ok_or_else(|| fmt("truncated pixel data"))?;
        raster.to_vec()
    };
    Ok(Gray8 {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Gray8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}x{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_round_trip() {
        let px: Vec<u8> = (0..12).map(|v| v * 20).collect();
        let bytes = encode_pgm(4, 3, &px);
        let img = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (4, 3, 255));
        assert_eq!(img.pixels, px);
    }

    #[test]
    fn p2_with_comments() {
        let src = b"P2\n# a comment\n2 2\n# another\n255\n0 128\n255 7\n";
        let img = decode_pgm(src, Path::new("x.pgm")).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 7]);
    }

    #[test]
    fn color_rejected() {
        let err = decode_pgm(b"P6\n1 1\n255\n\0\0\0", Path::new("c.ppm")).unwrap_err();
        assert!(err.to_string().contains("not grayscale"));
    }

    #[test]
    fn sixteen_bit_rejected() {
        assert!(decode_pgm(b"P5\n1 1\n65535\n\0\0", Path::new("d.pgm")).is_err());
    }

    #[test]
    fn truncated_rejected() {
        assert!(decode_pgm(b"P5\n4 4\n255\n\0\0", Path::new("t.pgm")).is_err());
    }
}
