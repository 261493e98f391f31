//! Binary PGM (`P5`, maxval <= 255) reading and writing.
//!
//! The header is `P5`, width, height and maxval separated by whitespace, with
//! `#` comments running to end of line, followed by exactly one whitespace byte
//! and `width * height` raw bytes.

use std::fs;
use std::path::Path;

use r3l_core::image::ImageBuffer;

use crate::error::{Error, Result};

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.at(path))
}

pub fn save_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

pub fn encode(image: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

/// Decoding failure before a path is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    Malformed { offset: usize, reason: String },
    Unsupported(String),
}

impl DecodeError {
    fn at(self, path: &Path) -> Error {
        match self {
            DecodeError::Malformed { offset, reason } => Error::Pgm {
                path: path.to_owned(),
                offset,
                reason,
            },
            DecodeError::Unsupported(reason) => Error::UnsupportedImage {
                path: path.to_owned(),
                reason,
            },
        }
    }
}

fn malformed(offset: usize, reason: impl Into<String>) -> DecodeError {
    DecodeError::Malformed {
        offset,
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DecodeError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| malformed(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer, DecodeError> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(b"P6") | Some(b"P3") => return Err(DecodeError::Unsupported("color images are not supported".into())),
        _ => return Err(malformed(0, "missing P5 magic number")),
    }
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(malformed(2, "expected whitespace after magic number"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval == 0 {
        return Err(malformed(maxval_at, "maxval must be positive"));
    }
    if maxval > 255 {
        return Err(DecodeError::Unsupported(format!("maxval {maxval} (only 8-bit images are supported)")));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(cur.pos, "expected single whitespace before raster"));
    }
    let start = cur.pos + 1;
    let len = width
        .checked_mul(height)
        .ok_or_else(|| malformed(start, "image dimensions overflow"))?;
    let end = start + len;
    if bytes.len() < end {
        return Err(malformed(
            bytes.len(),
            format!("truncated raster: expected {len} bytes, found {}", bytes.len() - start.min(bytes.len())),
        ));
    }
    let mut pixels = bytes[start..end].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            if usize::from(*p) > maxval {
                return Err(malformed(start, format!("pixel value {p} exceeds maxval {maxval}")));
            }
            *p = ((usize::from(*p) * 255 + maxval / 2) / maxval) as u8;
        }
    }
    ImageBuffer::new(width, height, pixels).map_err(|e| malformed(start, e.to_string()))
}
