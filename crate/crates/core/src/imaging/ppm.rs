//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut h = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(h.err("missing P6 magic"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(h.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(h.err("zero image dimension"));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.err("expected single whitespace after maxval"));
    }
    h.pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        });
    }
    let pixels = payload[..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Image::from_pixels(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact_and_black_payload_is_zero() {
        let bytes = encode_ppm(&Image::new(2, 3));
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let payload = &bytes[b"P6\n3 2\n255\n".len()..];
        assert_eq!(payload.len(), 3 * 2 * 3);
        assert!(payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn round_trip_within_quantization() {
        let px: Vec<f32> = (0..5 * 7 * 3).map(|i| ((i * 7919) % 1000) as f32 / 999.0).collect();
        let img = Image::from_pixels(5, 7, px).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        let max = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let mut bytes = encode_ppm(&Image::new(4, 4));
        bytes.truncate(bytes.len() - 5);
        let msg = decode_ppm(&bytes).unwrap_err().to_string();
        assert!(msg.contains("expected 48"), "{msg}");
        assert!(msg.contains("found 43"), "{msg}");
    }

    #[test]
    fn bad_magic_and_maxval() {
        assert!(decode_ppm(b"P3\n1 1\n255\n\0\0\0").is_err());
        let e = decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80").unwrap();
        assert_eq!(img.get(0, 0), [1.0, 0.0, 128.0 / 255.0]);
    }
}
