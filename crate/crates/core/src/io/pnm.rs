use std::path::Path;

use par_tensor::{Scalar, Tensor};

use super::{read_bytes, write_bytes};
use crate::error::{ParError, Result};
use crate::image::PanoImage;

/// Single-channel 8-bit raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |msg: String| ParError::format(path, msg);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad header field at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(bad(format!("empty raster {width}x{height}")));
    }
    Ok(Header {
        width,
        height,
        offset: pos + 1,
    })
}

fn quantize<T: Scalar>(x: T) -> u8 {
    (x.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm<T: Scalar>(img: &PanoImage<T>) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(ParError::contract(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.tensor().data().iter().map(|&x| quantize(x)));
    Ok(out)
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<PanoImage<T>> {
    let hd = parse_header(bytes, b"P6", path)?;
    let n = hd.width * hd.height * 3;
    let body = &bytes[hd.offset..];
    if body.len() != n {
        return Err(ParError::format(path, format!("expected {n} pixel bytes, found {}", body.len())));
    }
    let data = body.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    PanoImage::new(Tensor::new(&[hd.height, hd.width, 3], data)?)
        .map_err(|e| ParError::format(path, e.to_string()))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let hd = parse_header(bytes, b"P5", path)?;
    let body = &bytes[hd.offset..];
    if body.len() != hd.width * hd.height {
        return Err(ParError::format(
            path,
            format!("expected {} pixel bytes, found {}", hd.width * hd.height, body.len()),
        ));
    }
    Ok(GrayImage {
        width: hd.width,
        height: hd.height,
        pixels: body.to_vec(),
    })
}

pub fn write_ppm<T: Scalar>(path: &Path, img: &PanoImage<T>) -> Result<()> {
    write_bytes(path, &encode_ppm(img)?)
}

pub fn read_ppm<T: Scalar>(path: &Path) -> Result<PanoImage<T>> {
    decode_ppm(&read_bytes(path)?, path)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path)?, path)
}
