//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Images are RGB with maxval 255; region maps are single-channel with
//! maxval 255. Writers emit the canonical `P6\n<w> <h>\n255\n` header; the
//! reader also tolerates extra whitespace and `#` comments between header
//! tokens, as the format allows.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit single-channel image (used for region maps and heatmaps).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(self.err("unexpected end of header")),
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_separators()?;
        let start = self.pos;
        while let Some(b) = self.bytes.get(self.pos) {
            if b.is_ascii_digit() {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err("expected integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("invalid integer"))
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut p = HeaderParser { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(Error::Parse { offset: 0, msg: format!("expected magic {magic}") });
    }
    p.pos = 2;
    let width = p.integer()?;
    let height = p.integer()?;
    let maxval = p.integer()?;
    if maxval != 255 {
        return Err(p.err(format!("maxval must be 255, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(p.pos) {
        Some(b) if b.is_ascii_whitespace() => p.pos += 1,
        _ => return Err(p.err("expected single whitespace before payload")),
    }
    Ok((width, height, p.pos))
}

fn check_payload(bytes: &[u8], offset: usize, expected: usize) -> Result<()> {
    let have = bytes.len() - offset;
    if have != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(offset + have),
            msg: format!("payload has {have} bytes, expected {expected}"),
        });
    }
    Ok(())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, offset) = parse_header(bytes, "P6")?;
    check_payload(bytes, offset, width * height * 3)?;
    Ok(RgbImage { width, height, pixels: bytes[offset..].to_vec() })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm payload size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, offset) = parse_header(bytes, "P5")?;
    check_payload(bytes, offset, width * height)?;
    Ok(GrayImage { width, height, pixels: bytes[offset..].to_vec() })
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_ppm_file(path: &Path, image: &RgbImage) -> Result<()> {
    atomic_write(path, &encode_ppm(image))
}

pub fn read_ppm_file(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm_file(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    atomic_write(path, &encode_pgm(width, height, pixels))
}

pub fn read_pgm_file(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}
