//! Binary 8-bit grayscale PGM (P5) reading and writing.
//!
//! The accepted dialect is deliberately narrow: magic `P5`, optional `#`
//! comments inside the header, maxval exactly 255, then `width * height`
//! raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parse a binary (P5) PGM file.
pub fn read_pgm(path: &Path) -> Result<PgmImage> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<PgmImage, String> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err("bad magic bytes, expected P5".to_string());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        pos = skip_header_space(bytes, pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err("missing numeric header field".to_string());
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?;
        *field = text.parse::<usize>().map_err(|_| format!("bad header number {text}"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace before raster data".to_string());
    }
    pos += 1;

    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("degenerate extent {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    let expected = width * height;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(format!(
            "raster has {} bytes, expected {expected} for {width}x{height}",
            raster.len()
        ));
    }
    Ok(PgmImage { width, height, pixels: raster.to_vec() })
}

/// Skip whitespace and `#` comments inside the header.
fn skip_header_space(bytes: &[u8], mut pos: usize) -> std::result::Result<usize, String> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            break;
        }
        if pos >= bytes.len() {
            return Err("truncated header".to_string());
        }
    }
    if pos >= bytes.len() {
        return Err("truncated header".to_string());
    }
    Ok(pos)
}

/// Write a binary (P5) PGM file with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Usage(format!(
            "pixel buffer has {} bytes, expected {} for {width}x{height}",
            pixels.len(),
            width * height
        )));
    }
    let mut out = Vec::with_capacity(32 + pixels.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}
