//! Dense multi-level anchor grids and anchor-to-groundtruth IoU matrices.

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec<T: Real = f64> {
    /// Grid step in pixels. One anchor group sits every `stride` pixels.
    pub stride: usize,
    /// Side length of the unit-scale square anchor at this level.
    pub base_size: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig<T: Real = f64> {
    pub levels: Vec<LevelSpec<T>>,
    pub scales: Vec<T>,
    /// Height/width ratios. Area is preserved: w = base*scale/sqrt(r),
    /// h = base*scale*sqrt(r).
    pub aspect_ratios: Vec<T>,
}

impl<T: Real> Default for AnchorConfig<T> {
    fn default() -> Self {
        AnchorConfig {
            levels: vec![
                LevelSpec { stride: 8, base_size: T::c(16.0) },
                LevelSpec { stride: 16, base_size: T::c(32.0) },
            ],
            scales: vec![T::one(), T::c(std::f64::consts::SQRT_2)],
            aspect_ratios: vec![T::c(0.5), T::one(), T::c(2.0)],
        }
    }
}

impl<T: Real> AnchorConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("anchor config needs at least one level"));
        }
        let mut prev = 0usize;
        for lvl in &self.levels {
            if lvl.stride == 0 || lvl.stride <= prev {
                return Err(Error::invalid("anchor strides must be positive and strictly increasing"));
            }
            if lvl.base_size <= T::zero() {
                return Err(Error::invalid("anchor base sizes must be positive"));
            }
            prev = lvl.stride;
        }
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::invalid("anchor config needs at least one scale and one ratio"));
        }
        if self.scales.iter().any(|&s| s <= T::zero())
            || self.aspect_ratios.iter().any(|&r| r <= T::zero())
        {
            return Err(Error::invalid("anchor scales and ratios must be positive"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// All anchors for one image size, in the canonical order: level-major, then
/// cells row-major, then scale, then ratio.
#[derive(Debug, Clone)]
pub struct AnchorSet<T: Real = f64> {
    pub boxes: Vec<BBox<T>>,
    pub level_index: Vec<usize>,
    /// Grid cells per level as (rows, cols).
    pub level_dims: Vec<(usize, usize)>,
}

impl<T: Real> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Generates the dense grid. Anchors are centered at ((i+0.5)*stride,
/// (j+0.5)*stride) and are not clipped to the image.
pub fn generate_anchors<T: Real>(
    config: &AnchorConfig<T>,
    image_w: usize,
    image_h: usize,
) -> Result<AnchorSet<T>> {
    config.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    let mut boxes = Vec::new();
    let mut level_index = Vec::new();
    let mut level_dims = Vec::new();
    let half = T::c(0.5);
    for (li, lvl) in config.levels.iter().enumerate() {
        let cols = image_w.div_ceil(lvl.stride);
        let rows = image_h.div_ceil(lvl.stride);
        level_dims.push((rows, cols));
        let stride = T::from_count(lvl.stride);
        for iy in 0..rows {
            let cy = (T::from_count(iy) + half) * stride;
            for ix in 0..cols {
                let cx = (T::from_count(ix) + half) * stride;
                for &scale in &config.scales {
                    let side = lvl.base_size * scale;
                    for &ratio in &config.aspect_ratios {
                        let sqrt_r = ratio.sqrt();
                        let w = side / sqrt_r;
                        let h = side * sqrt_r;
                        boxes.push(BBox::from_center(cx, cy, w, h));
                        level_index.push(li);
                    }
                }
            }
        }
    }
    Ok(AnchorSet { boxes, level_index, level_dims })
}

/// Row-major IoU matrix, one row per anchor, one column per gt.
#[derive(Debug, Clone)]
pub struct IouMatrix<T: Real = f64> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

impl<T: Real> IouMatrix<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Index and value of the best gt for `row`; ties break to the lower
    /// column. None when there are no columns.
    pub fn row_argmax(&self, row: usize) -> Option<(usize, T)> {
        let r = self.row(row);
        let mut best: Option<(usize, T)> = None;
        for (j, &v) in r.iter().enumerate() {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        best
    }

    /// Index and value of the best anchor for `col`; ties break to the lower
    /// row.
    pub fn col_argmax(&self, col: usize) -> Option<(usize, T)> {
        let mut best: Option<(usize, T)> = None;
        for i in 0..self.rows {
            let v = self.get(i, col);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        best
    }
}

pub fn iou_matrix<T: Real>(anchors: &[BBox<T>], gts: &[BBox<T>]) -> IouMatrix<T> {
    let mut data = Vec::with_capacity(anchors.len() * gts.len());
    for a in anchors {
        for g in gts {
            data.push(iou_unchecked(a, g));
        }
    }
    IouMatrix { data, rows: anchors.len(), cols: gts.len() }
}
