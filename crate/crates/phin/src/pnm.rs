//! Binary PPM (P6) frames and PGM (P5) masks, 8 bits per sample.

use std::path::Path;

use phin_core::media::{Image, Mask};

use crate::error::{Error, Result};
use crate::fsio;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Data("file too short for a PNM header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("malformed PNM header number".into()))?;
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::Data("missing whitespace after PNM header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval}; only 8-bit 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Data("PNM image has zero size".into()));
    }
    Ok(Header { magic, width, height, offset: pos + 1 })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let data = &bytes[h.offset.min(bytes.len())..];
    if data.len() < need {
        return Err(Error::Data(format!("truncated PNM data: header claims {need} bytes, {} present", data.len())));
    }
    Ok(&data[..need])
}

/// Byte `v` maps to `v / 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Data("expected a P6 frame".into()));
    }
    let data = payload(bytes, &h, 3)?;
    Ok(Image::new(h.height, h.width, data.iter().map(|&b| b as f32 / 255.0).collect())?)
}

/// Values are scaled by 255 and rounded half up.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    out
}

/// Bytes `0..=127` read as background, `128..=255` as foreground.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Data("expected a P5 mask".into()));
    }
    let data = payload(bytes, &h, 1)?;
    Ok(Mask::new(h.height, h.width, data.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect())?)
}

/// Soft mask values in `[0, 1]` scaled by 255, rounded half up.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| to_byte(v)));
    out
}

/// Raw grey levels of a P5 file scaled to `[0, 1]`, without thresholding.
pub fn decode_pgm_soft(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Data("expected a P5 mask".into()));
    }
    let data = payload(bytes, &h, 1)?;
    Ok(Mask::new(h.height, h.width, data.iter().map(|&b| b as f32 / 255.0).collect())?)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fsio::read(path)?).map_err(|e| e.in_file(path))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fsio::write(path, &encode_ppm(img))
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    decode_pgm_mask(&fsio::read(path)?).map_err(|e| e.in_file(path))
}

pub fn read_pgm_soft(path: &Path) -> Result<Mask> {
    decode_pgm_soft(&fsio::read(path)?).map_err(|e| e.in_file(path))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    fsio::write(path, &encode_pgm(mask))
}
