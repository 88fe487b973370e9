//! Binary PGM (P5) / PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use super::ImageShape;
use crate::error::{Error, Result};

/// Width of the white gutter between grid tiles.
pub const SEPARATOR: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 (P5) or 3 (P6)
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl PnmImage {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        PnmImage {
            width,
            height,
            channels,
            pixels: vec![value; width * height * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = header_token(bytes, &mut pos)?;
        let channels = match magic.1 {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::parse(magic.0, format!("unsupported netpbm magic {other:?}"))),
        };
        let width = header_number(bytes, &mut pos)?;
        let height = header_number(bytes, &mut pos)?;
        let maxval_at = pos;
        let maxval = header_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::parse(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::parse(pos, "missing whitespace after header"));
        }
        pos += 1;
        let len = width * height * channels;
        let raster = &bytes[pos..];
        if raster.len() != len {
            return Err(Error::parse(
                pos + raster.len().min(len),
                format!("raster has {} bytes, expected {len}", raster.len()),
            ));
        }
        Ok(PnmImage {
            width,
            height,
            channels,
            pixels: raster.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        PnmImage::decode(&fs::read(path)?)
    }
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<(usize, &'a str)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(start, "truncated netpbm header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::parse(start, "non-ASCII netpbm header"))?;
    Ok((start, tok))
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let (at, tok) = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::parse(at, format!("expected a number, found {tok:?}")))
}

/// Clamp to `[0, 1]` and scale to 0..=255, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Tiles `samples` row-major into a `rows x cols` grid with white gutters.
pub fn render_grid<S: AsRef<[f64]>>(
    samples: &[S],
    rows: usize,
    cols: usize,
    shape: ImageShape,
) -> Result<PnmImage> {
    if rows == 0 || cols == 0 {
        return Err(Error::input("grid needs at least one row and column"));
    }
    if rows * cols != samples.len() {
        return Err(Error::input(format!(
            "{rows}x{cols} grid needs {} samples, got {}",
            rows * cols,
            samples.len()
        )));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::input("grid images need 1 or 3 channels"));
    }
    let ImageShape {
        height: h,
        width: w,
        channels: ch,
    } = shape;
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows * h + (rows - 1) * SEPARATOR;
    let mut img = PnmImage::filled(width, height, ch, 255);
    for (idx, sample) in samples.iter().enumerate() {
        let sample = sample.as_ref();
        if sample.len() != shape.len() {
            return Err(Error::input(format!(
                "sample {idx} has {} values, shape {shape} needs {}",
                sample.len(),
                shape.len()
            )));
        }
        let top = (idx / cols) * (h + SEPARATOR);
        let left = (idx % cols) * (w + SEPARATOR);
        for r in 0..h {
            let dst = ((top + r) * width + left) * ch;
            let src = r * w * ch;
            for (d, &s) in img.pixels[dst..dst + w * ch]
                .iter_mut()
                .zip(&sample[src..src + w * ch])
            {
                *d = quantize(s);
            }
        }
    }
    Ok(img)
}

pub fn write_image_grid<S: AsRef<[f64]>>(
    samples: &[S],
    rows: usize,
    cols: usize,
    shape: ImageShape,
    path: &Path,
) -> Result<()> {
    render_grid(samples, rows, cols, shape)?.write(path)
}
