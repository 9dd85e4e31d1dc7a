//! Binary PGM (P5) and PPM (P6) output.

use std::path::Path;

use crate::error::{Error, Result};

/// Min-max normalises `values` to bytes; a constant map becomes mid-gray.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Nearest-neighbour upscaling of a `height x width x channels` byte image.
pub fn upscale(pixels: &[u8], height: usize, width: usize, channels: usize, factor: usize) -> Vec<u8> {
    let (oh, ow) = (height * factor, width * factor);
    let mut out = Vec::with_capacity(oh * ow * channels);
    for y in 0..oh {
        for x in 0..ow {
            let src = ((y / factor) * width + x / factor) * channels;
            out.extend_from_slice(&pixels[src..src + channels]);
        }
    }
    out
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "{} bytes for a {width}x{height} image with {channels} channel(s)",
            pixels.len()
        )));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_netpbm(path, "P5", width, height, 1, pixels)
}

/// `pixels` is interleaved RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    write_netpbm(path, "P6", width, height, 3, pixels)
}

/// Parses a P5 or P6 file into `(width, height, channels, pixels)`.
pub fn read_netpbm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = || Error::Format("malformed PGM/PPM header".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad()),
    };
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[3] != "255" {
        return Err(bad());
    }
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != width * height * channels {
        return Err(Error::Format(format!(
            "expected {} pixel bytes, found {}",
            width * height * channels,
            data.len()
        )));
    }
    Ok((width, height, channels, data.to_vec()))
}

/// Draws a one-pixel rectangle outline, clipped to the image.
pub fn draw_box(pixels: &mut [u8], width: usize, height: usize, bbox: [f64; 4], color: [u8; 3]) {
    if width == 0 || height == 0 {
        return;
    }
    let clip = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    let (x0, y0) = (clip(bbox[0], width), clip(bbox[1], height));
    let (x1, y1) = (clip(bbox[2] - 1.0, width), clip(bbox[3] - 1.0, height));
    let mut put = |x: usize, y: usize| pixels[(y * width + x) * 3..][..3].copy_from_slice(&color);
    for x in x0..=x1.max(x0) {
        put(x, y0);
        put(x, y1.max(y0));
    }
    for y in y0..=y1.max(y0) {
        put(x0, y);
        put(x1.max(x0), y);
    }
}
