//! IDX tensors (the MNIST distribution format).
//!
//! Big-endian u32 magic (`2051` for 3-d u8 image stacks, `2049` for u8 label
//! vectors), one big-endian u32 per dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, Examples, ImageShape};
use crate::error::{Error, Result};
use crate::netcore::ByteCursor;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn expect_magic(cur: &mut ByteCursor<'_>, want: u32) -> Result<()> {
    let magic = cur.u32_be()?;
    if magic != want {
        return Err(Error::parse(0, format!("bad IDX magic {magic}, expected {want}")));
    }
    Ok(())
}

fn payload<'a>(cur: &mut ByteCursor<'a>, len: usize) -> Result<&'a [u8]> {
    let bytes = cur.take(len)?;
    cur.finish()?;
    Ok(bytes)
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = ByteCursor::new(bytes);
    expect_magic(&mut cur, IMAGES_MAGIC)?;
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::parse(4, "image dimensions overflow"))?;
    let pixels = payload(&mut cur, len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = ByteCursor::new(bytes);
    expect_magic(&mut cur, LABELS_MAGIC)?;
    let count = cur.u32_be()? as usize;
    Ok(payload(&mut cur, count)?.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixels scaled to `[0, 1]`, each image flattened row-major.
pub fn images_to_dataset(images: &IdxImages, labels: Option<Vec<u8>>) -> Result<Dataset> {
    let dim = images.rows * images.cols;
    if dim == 0 {
        return Err(Error::parse(8, "IDX images have a zero dimension"));
    }
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = match labels {
        Some(l) if l.len() != images.count => {
            return Err(Error::input(format!(
                "{} labels for {} images",
                l.len(),
                images.count
            )))
        }
        Some(l) => Some(l.into_iter().map(usize::from).collect()),
        None => None,
    };
    Ok(Dataset::new(Examples::new(data, dim)?, labels)?
        .with_shape(ImageShape::new(images.rows, images.cols, 1)))
}

/// Inverse of [`images_to_dataset`] for data on the 1/255 grid.
pub fn dataset_to_images(dataset: &Dataset) -> Result<IdxImages> {
    let shape = dataset
        .shape_hint
        .filter(|s| s.channels == 1)
        .ok_or_else(|| Error::input("IDX export needs a single-channel image shape"))?;
    let pixels = dataset
        .examples
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(IdxImages {
        count: dataset.len(),
        rows: shape.height,
        cols: shape.width,
        pixels,
    })
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = parse_images(&fs::read(images_path)?)?;
    let labels = match labels_path {
        Some(p) => Some(parse_labels(&fs::read(p)?)?),
        None => None,
    };
    images_to_dataset(&images, labels)
}
