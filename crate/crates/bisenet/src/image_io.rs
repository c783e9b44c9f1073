//! Binary Netpbm image I/O: P6 (color, for network inputs) and P5
//! (grayscale, for predicted label maps).
//!
//! Color images map to (1, 3, h, w) tensors with values in [0, 1];
//! predictions are written as gray levels spread over the class range so
//! they are viewable in any image viewer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{label_to_gray, LabelMap};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads whitespace-separated header tokens, honouring `#` comments.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenReader { bytes, pos: 0 }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    /// Position of the first data byte: exactly one whitespace byte after
    /// the last header token.
    fn data_start(&self) -> usize {
        self.pos + 1
    }
}

fn parse_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut reader = TokenReader::new(bytes);
    let tag = reader.token().ok_or_else(|| format_err(path, "empty file"))?;
    if tag != magic.as_bytes() {
        return Err(format_err(
            path,
            format!("expected {magic} header, got {:?}", String::from_utf8_lossy(tag)),
        ));
    }
    let mut dims = [0usize; 3];
    for (i, what) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = reader.token().ok_or_else(|| format_err(path, format!("missing {what}")))?;
        dims[i] = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad {what}")))?;
    }
    let [w, h, maxval] = dims;
    if maxval != 255 {
        return Err(format_err(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    Ok((h, w, reader.data_start()))
}

/// Reads a binary P6 color image into a (1, 3, h, w) tensor in [0, 1].
pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let (h, w, start) = parse_header(path, &bytes, "P6")?;
    let expected = 3 * h * w;
    let data = bytes
        .get(start..start + expected)
        .ok_or_else(|| format_err(path, format!("truncated pixel data, need {expected} bytes")))?;
    let mut t = Tensor::<S>::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(y * w + x) * 3 + c] as f64 / 255.0;
                t.set(0, c, y, x, S::from_f64(v));
            }
        }
    }
    Ok(t)
}

/// Writes a (1, 3, h, w) tensor with values in [0, 1] as binary P6.
pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::config(format!("P6 needs a (1,3,h,w) tensor, got {s}")));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = image.get(0, c, y, x).as_f64();
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Reads a binary P5 grayscale image.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let (h, w, start) = parse_header(path, &bytes, "P5")?;
    let expected = h * w;
    let data = bytes
        .get(start..start + expected)
        .ok_or_else(|| format_err(path, format!("truncated pixel data, need {expected} bytes")))?;
    Ok((h, w, data.to_vec()))
}

/// Writes a label map as binary P5, classes spread over the gray range.
pub fn write_label_pgm(path: &Path, label: &LabelMap, classes: usize) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", label.w, label.h).into_bytes();
    for y in 0..label.h {
        for x in 0..label.w {
            bytes.push(label_to_gray(label.get(y, x), classes));
        }
    }
    fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
