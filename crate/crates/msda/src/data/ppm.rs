//! Binary PPM (P6) image files, maxval 255, row-major RGB.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Quantizes one channel value from [0, 1] to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts planar 3×S×S floats in [0, 1] to interleaved RGB bytes.
pub fn planar_to_rgb8(image: &[f64], size: usize) -> Vec<u8> {
    let plane = size * size;
    debug_assert_eq!(image.len(), 3 * plane);
    let mut rgb = Vec::with_capacity(3 * plane);
    for px in 0..plane {
        rgb.push(quantize(image[px]));
        rgb.push(quantize(image[plane + px]));
        rgb.push(quantize(image[2 * plane + px]));
    }
    rgb
}

/// Writes a square RGB image as binary PPM.
pub fn write_ppm(path: &Path, image: &[f64], size: usize) -> Result<()> {
    let rgb = planar_to_rgb8(image, size);
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Reads a binary PPM into planar 3×S×S floats in [0, 1].
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let parse_err = |line: usize, detail: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.to_string(),
    };

    // Header: magic, dimensions, maxval, each terminated by one whitespace
    // byte. Comments are not produced by this crate and are rejected.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            break;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err(1, "non-ASCII header"))?);
    }
    if fields.len() != 4 || fields[0] != "P6" {
        return Err(parse_err(1, "not a P6 PPM header"));
    }
    let w: usize = fields[1].parse().map_err(|_| parse_err(1, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| parse_err(1, "bad height"))?;
    if w != h {
        return Err(parse_err(1, "image must be square"));
    }
    if fields[3] != "255" {
        return Err(parse_err(1, "maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let plane = w * h;
    let data = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| parse_err(1, "pixel data truncated"))?;
    let mut image = vec![0.0; 3 * plane];
    for px in 0..plane {
        for ch in 0..3 {
            image[ch * plane + px] = data[3 * px + ch] as f64 / 255.0;
        }
    }
    Ok((image, w))
}
