//! Datasets and the file formats around them.

pub mod idx;
pub mod pnm;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use idx::load_idx;
pub use pnm::{write_image_grid, PnmImage};
pub use synth::{synth_mixture, SynthSpec};

/// `n x D` row-major matrix of training examples.
///
/// Deliberately carries no labels: this is all the trainer ever sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    data: Vec<f64>,
    dim: usize,
}

impl Examples {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("example dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "{} values do not split into rows of {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("examples contain non-finite values"));
        }
        Ok(Examples { data, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input(format!("every row must have {dim} values")));
        }
        Examples::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// First `n` rows (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Examples {
        let n = n.min(self.len());
        Examples {
            data: self.data[..n * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}

/// Height, width and channel count used to render an example as an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Square grayscale if `dim` is a perfect square, square RGB if `dim / 3` is,
    /// otherwise a single grayscale row.
    pub fn guess(dim: usize) -> Self {
        let side = |n: usize| {
            let s = (n as f64).sqrt().round() as usize;
            (s * s == n).then_some(s)
        };
        if let Some(s) = side(dim) {
            ImageShape::new(s, s, 1)
        } else if let Some(s) = dim.is_multiple_of(3).then(|| side(dim / 3)).flatten() {
            ImageShape::new(s, s, 3)
        } else {
            ImageShape::new(1, dim, 1)
        }
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FromStr for ImageShape {
    type Err = Error;

    /// `HxW` or `HxWxC`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::input(format!("bad image shape {s:?}, expected HxW or HxWxC")))?;
        match parts[..] {
            [h, w] if h > 0 && w > 0 => Ok(ImageShape::new(h, w, 1)),
            [h, w, c] if h > 0 && w > 0 && (c == 1 || c == 3) => Ok(ImageShape::new(h, w, c)),
            _ => Err(Error::input(format!("bad image shape {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Examples,
    /// Ground truth for evaluation only.
    pub labels: Option<Vec<usize>>,
    pub shape_hint: Option<ImageShape>,
}

impl Dataset {
    pub fn new(examples: Examples, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != examples.len() {
                return Err(Error::input(format!(
                    "{} labels for {} examples",
                    l.len(),
                    examples.len()
                )));
            }
        }
        Ok(Dataset {
            examples,
            labels,
            shape_hint: None,
        })
    }

    pub fn with_shape(mut self, shape: ImageShape) -> Self {
        self.shape_hint = Some(shape);
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of distinct label values, taken as `max + 1`.
    pub fn label_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn head(&self, n: usize) -> Dataset {
        let examples = self.examples.head(n);
        let labels = self
            .labels
            .as_ref()
            .map(|l| l[..examples.len()].to_vec());
        Dataset {
            examples,
            labels,
            shape_hint: self.shape_hint,
        }
    }
}
