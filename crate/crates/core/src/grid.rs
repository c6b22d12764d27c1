//! Spatial grids of per-pixel embeddings and class labels.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Label value that belongs to no class.
pub const IGNORE: u32 = u32::MAX;

/// `height x width` grid of `dim`-length vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Argument("feature grid dimensions must be positive".into()));
        }
        if data.len() != height * width * dim {
            return Err(dim_err("feature grid values", height * width * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        let dim = pixels.first().map_or(0, Vec::len);
        if pixels.iter().any(|p| p.len() != dim) {
            return Err(Error::Dimension("pixel vectors have differing lengths".into()));
        }
        Self::new(height, width, dim, pixels.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Spatial mean of all pixel vectors.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for p in self.pixels() {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// `height x width` grid of class ids in `[0, num_classes)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument("label grid dimensions must be positive".into()));
        }
        if labels.len() != height * width {
            return Err(dim_err("label grid values", height * width, labels.len()));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= num_classes)
        {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u32) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> u32 {
        self.labels[i]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    /// Class of pixel `i`, or `None` for [`IGNORE`].
    #[inline]
    pub fn class_of(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            IGNORE => None,
            l => Some(l as usize),
        }
    }

    /// Pixel counts per class (IGNORE excluded).
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            if l != IGNORE {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Sub-grid starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Argument("crop window outside the grid".into()));
        }
        let mut labels = Vec::with_capacity(height * width);
        for r in top..top + height {
            labels.extend_from_slice(&self.labels[r * self.width + left..r * self.width + left + width]);
        }
        Self::new(height, width, self.num_classes, labels)
    }

    pub fn same_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Dimension(format!(
                "grid is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbour resize of a label grid to `target_h x target_w`.
///
/// Target pixel `(r, c)` takes source pixel `(floor(r * H / h), floor(c * W / w))`.
pub fn downsample_labels(labels: &LabelGrid, target_h: usize, target_w: usize) -> Result<LabelGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Argument("target dimensions must be positive".into()));
    }
    if target_h > labels.height || target_w > labels.width {
        return Err(Error::Argument(format!(
            "cannot downsample {}x{} to larger {target_h}x{target_w}",
            labels.height, labels.width
        )));
    }
    let mut out = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let sr = r * labels.height / target_h;
        for c in 0..target_w {
            let sc = c * labels.width / target_w;
            out.push(labels.at(sr, sc));
        }
    }
    LabelGrid::new(target_h, target_w, labels.num_classes, out)
}
